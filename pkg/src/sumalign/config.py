"""Run configuration: a sectioned TOML document with every field defaulted."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w


class ConfigError(ValueError):
    """Unknown keys, bad types or unusable values in a run configuration."""


@dataclass
class RunSection:
    out_dir: str = "runs/default"
    seed: int = 0


@dataclass
class DataSection:
    train: str = ""
    valid: str = ""
    test: str = ""
    dedup: bool = False
    k: int = 40


@dataclass
class TokenizerSection:
    vocab_size: int = 8192


@dataclass
class ModelSection:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 512
    dec_layers: int = 0          # 0: mirror n_layers
    dropout: float = 0.1
    tie_lm_head: bool = False


@dataclass
class PretrainSection:
    batch_size: int = 32
    lr: float = 5e-4
    steps: int = 2000
    mask_rate: float = 0.15
    tasks: list[str] = field(default_factory=lambda: ["awp", "ulm", "mlm"])
    checkpoint_every: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_frac: float = 0.01
    awp_input: str = "code"
    resume: str = ""             # checkpoint to continue from


@dataclass
class FinetuneSection:
    batch_size: int = 32
    lr: float = 5e-4
    steps: int = 2000
    beam: int = 5
    max_gen_len: int = 128
    freeze_encoder: bool = False
    from_pretrained: bool = True
    eval_every: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_frac: float = 0.01
    length_norm: bool = False


@dataclass
class EvaluateSection:
    split: str = "test"
    hypotheses: str = ""
    references: str = ""
    baseline: str = ""
    codes: str = ""
    figures: bool = True


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "tokenizer": TokenizerSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "finetune": FinetuneSection,
    "evaluate": EvaluateSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def echo(self, directory: str | Path) -> Path:
        """Write the resolved configuration next to a command's outputs."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / "config.resolved.toml"
        path.write_text(self.to_toml(), encoding="utf-8")
        return path

    def seed_for(self, component: str) -> int:
        """Independent seed for one component, derived from the root seed."""
        ss = np.random.SeedSequence([self.run.seed, zlib.crc32(component.encode())])
        return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def from_dict(doc: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for section, values in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        obj = getattr(cfg, section)
        known = {f.name: f for f in fields(obj)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(obj, key, _coerce(section, key, value, getattr(obj, key)))
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a TOML file (optional) and apply ``section.key=value`` overrides.

    Override values are parsed as TOML literals, falling back to a bare
    string (so ``data.train=foo.jsonl`` works without quotes).
    """
    cfg = RunConfig()
    if path is not None:
        try:
            doc = tomli.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        cfg = from_dict(doc, cfg)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        cfg = from_dict({section: {key: value}}, cfg)
    return cfg
