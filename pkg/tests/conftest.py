import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import torch

from sumalign.batching import collate, collate_seq2seq
from sumalign.cli import main
from sumalign.corpus import ActionWordTable, build_action_table, synthetic_corpus
from sumalign.model import ModelConfig, SummarizationModel
from sumalign.tokenizer import TokenizedPair, assemble_all, train_vocab


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(32, seed=0)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return train_vocab(small_corpus, 300)


@pytest.fixture(scope="session")
def small_table(small_corpus):
    return build_action_table(small_corpus)


@pytest.fixture(scope="session")
def small_pairs(small_vocab, small_corpus):
    return assemble_all(small_vocab, small_corpus)


@pytest.fixture
def table41():
    words = [f"w{i}" for i in range(40)]
    return ActionWordTable(words=words, counts={w: 40 - i for i, w in enumerate(words)})


def tiny_config(vocab_size=20, **kw):
    base = dict(vocab_size=vocab_size, n_classes=41, d_model=8, n_layers=2, n_heads=2, d_ffn=16,
                max_len=32, max_target_len=16, dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, scale=0.5, vocab_size=20, dtype=torch.float64, **kw):
    """Tiny model with O(1) random weights so every path carries signal."""
    m = SummarizationModel(tiny_config(vocab_size=vocab_size, seed=seed, **kw)).to(dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=dtype) * scale)
    return m.eval()


@pytest.fixture
def tiny_pairs():
    return [
        TokenizedPair((1, 5, 6, 7, 2), (8, 9, 10, 2), "w3"),
        TokenizedPair((1, 11, 12, 2), (13, 14, 2), "unseen"),
    ]


@pytest.fixture
def tiny_batches(tiny_pairs, table41):
    b = {k: collate(tiny_pairs, k, table41, seed=3) for k in ("awp", "ulm", "mlm")}
    return b, collate_seq2seq(tiny_pairs)


# -- command-line pipeline fixtures ----------------------------------------------------

OVERFIT_TOML = """
[run]
seed = 0

[data]
train = "{train}"

[tokenizer]
vocab_size = 300

[model]
d_model = 64
n_heads = 4
d_ffn = 256

[pretrain]
steps = {steps}
batch_size = 32

[finetune]
steps = {steps}
batch_size = 32
eval_every = 200

[evaluate]
split = "train"
"""


def run_cli(*argv):
    """Run the command line in-process; returns (exit code, seconds)."""
    t0 = time.perf_counter()
    code = main([str(a) for a in argv])
    return code, time.perf_counter() - t0


def write_pipeline_config(root: Path, n_pairs: int = 32, steps: int = 2000, extra: str = "") -> Path:
    root.mkdir(parents=True, exist_ok=True)
    synthetic_corpus(n_pairs, seed=0).write_jsonl(root / "train.jsonl")
    cfg = root / "run.toml"
    cfg.write_text(OVERFIT_TOML.format(train=root / "train.jsonl", steps=steps) + extra, encoding="utf-8")
    return cfg


@dataclass
class PipelineRun:
    root: Path
    config: Path
    out: Path
    exit_codes: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    @property
    def training_seconds(self) -> float:
        return sum(self.seconds[k] for k in ("prepare", "pretrain", "finetune"))


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """prepare + pretrain (2k steps) + finetune (2k steps) + evaluate on 32 synthetic pairs."""
    root = tmp_path_factory.mktemp("overfit")
    run = PipelineRun(root, write_pipeline_config(root), root / "run")
    for cmd in ("prepare", "pretrain", "finetune", "evaluate"):
        code, secs = run_cli(cmd, "-c", run.config, "-o", run.out)
        run.exit_codes[cmd], run.seconds[cmd] = code, secs
    return run


# -- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        ACCEPTANCE_RESULTS[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, verdict, detail = ACCEPTANCE_RESULTS[number]
        line = f"[{verdict}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
