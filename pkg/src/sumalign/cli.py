"""Command-line entry points: prepare, pretrain, finetune, summarize, evaluate, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import figures
from .config import ConfigError, RunConfig, load_config
from .corpus import ActionWordTable, CorpusSplit, build_action_table, coverage, dedup_against, load_corpus
from .metrics import METRICS, ScoreReport, format_table, score_corpus
from .model import ModelConfig, SummarizationModel, load_checkpoint, model_from_checkpoint
from .pretrain import PretrainConfig, PretrainResult, pretrain_run, task_tag
from .summarizer import FinetuneConfig, FinetuneResult, finetune_run, generate, summarize
from .tokenizer import Vocabulary, assemble_all, train_vocab

logger = logging.getLogger("sumalign")

COMMANDS = ("prepare", "pretrain", "finetune", "summarize", "evaluate", "ablate")


class UsageError(Exception):
    """Bad invocation: missing inputs, missing prerequisite artifacts."""


@dataclass
class Artifacts:
    vocab: Vocabulary
    table: ActionWordTable
    splits: dict[str, CorpusSplit]


def artifact_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "artifacts"


# -- prepare ------------------------------------------------------------------------

def cmd_prepare(cfg: RunConfig) -> dict:
    """Load splits, optionally dedup train against test, train the vocabulary
    and the action-word table, and write everything under ``artifacts/``."""
    if not cfg.data.train:
        raise UsageError("data.train is not set")
    splits: dict[str, CorpusSplit] = {}
    for name in ("train", "valid", "test"):
        path = getattr(cfg.data, name)
        if not path:
            continue
        if not Path(path).is_file():
            raise UsageError(f"corpus file not found: {path}")
        splits[name] = load_corpus(path, name)

    removed = 0
    if cfg.data.dedup and "test" in splits:
        before = len(splits["train"])
        splits["train"] = dedup_against(splits["train"], splits["test"])
        removed = before - len(splits["train"])
        logger.info("dedup removed %d train sample(s) duplicated in test", removed)
    if len(splits["train"]) == 0:
        raise UsageError("training split is empty")

    try:
        vocab = train_vocab(splits["train"], cfg.tokenizer.vocab_size)
    except ValueError as e:
        raise RuntimeError(f"prepare/tokenizer: {e}") from e
    table = build_action_table(splits["train"], cfg.data.k)

    out = artifact_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    table.save(out / "action_table.json")
    for name, split in splits.items():
        split.write_jsonl(out / f"{name}.jsonl")
    truncated = sum(p.truncated for p in assemble_all(vocab, splits["train"]))
    summary = {
        "samples": {k: len(v) for k, v in splits.items()},
        "skipped_lines": {k: v.skipped for k, v in splits.items()},
        "dedup_removed": removed,
        "vocab_size": len(vocab),
        "n_classes": table.n_classes,
        "action_word_coverage": {k: coverage(table, v) for k, v in splits.items()},
        "train_truncated": truncated,
    }
    (out / "prepare.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    cfg.echo(out)
    return summary


def load_artifacts(cfg: RunConfig) -> Artifacts:
    d = artifact_dir(cfg)
    if not (d / "vocab.json").is_file():
        raise UsageError(f"no prepared artifacts in {d}; run 'prepare' first")
    splits = {}
    for name in ("train", "valid", "test"):
        p = d / f"{name}.jsonl"
        if p.is_file():
            splits[name] = load_corpus(p, name)
    return Artifacts(Vocabulary.load(d / "vocab.json"), ActionWordTable.load(d / "action_table.json"), splits)


def build_model(cfg: RunConfig, art: Artifacts) -> SummarizationModel:
    m = cfg.model
    mc = ModelConfig(vocab_size=len(art.vocab), n_classes=art.table.n_classes, d_model=m.d_model,
                     n_layers=m.n_layers, n_heads=m.n_heads, d_ffn=m.d_ffn,
                     dec_layers=m.dec_layers or None, dropout=m.dropout, tie_lm_head=m.tie_lm_head,
                     seed=cfg.seed_for("init"))
    return SummarizationModel(mc)


# -- pretrain / finetune ------------------------------------------------------------

def pretrain_config(cfg: RunConfig, tasks: Sequence[str] | None = None) -> PretrainConfig:
    p = cfg.pretrain
    return PretrainConfig(batch_size=p.batch_size, lr=p.lr, steps=p.steps, mask_rate=p.mask_rate,
                          tasks=tuple(tasks if tasks is not None else p.tasks), seed=cfg.seed_for("pretrain"),
                          checkpoint_every=p.checkpoint_every, weight_decay=p.weight_decay,
                          grad_clip=p.grad_clip, warmup_frac=p.warmup_frac, awp_input=p.awp_input)


def finetune_config(cfg: RunConfig) -> FinetuneConfig:
    f = cfg.finetune
    return FinetuneConfig(batch_size=f.batch_size, lr=f.lr, steps=f.steps, beam=f.beam,
                          max_gen_len=f.max_gen_len, freeze_encoder=f.freeze_encoder,
                          seed=cfg.seed_for("finetune"), eval_every=f.eval_every,
                          weight_decay=f.weight_decay, grad_clip=f.grad_clip,
                          warmup_frac=f.warmup_frac, length_norm=f.length_norm)


def cmd_pretrain(cfg: RunConfig, tasks: Sequence[str] | None = None, subdir: str = "pretrain") -> PretrainResult:
    art = load_artifacts(cfg)
    try:
        pcfg = pretrain_config(cfg, tasks)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = cfg.out_dir / subdir
    cfg.echo(out)
    pairs = assemble_all(art.vocab, art.splits["train"])
    resume = cfg.pretrain.resume or None
    if resume and not Path(resume).is_file():
        raise UsageError(f"resume checkpoint not found: {resume}")
    res = pretrain_run(pcfg, pairs, art.vocab, art.table, build_model(cfg, art), out_dir=out, resume_from=resume)
    if pcfg.steps:
        figures.plot_loss_curves(out / "loss.csv", out / "loss.png")
    logger.info("pretrain [%s] done in %.1fs", res.tag, res.seconds)
    return res


def cmd_finetune(cfg: RunConfig, pretrained: str | Path | None = None, subdir: str = "finetune") -> FinetuneResult:
    art = load_artifacts(cfg)
    fcfg = finetune_config(cfg)
    if cfg.finetune.from_pretrained:
        ckpt = Path(pretrained) if pretrained else cfg.out_dir / "pretrain" / "final.pt"
        if not ckpt.is_file():
            raise UsageError(f"pre-trained checkpoint not found: {ckpt} (run 'pretrain' or set "
                             f"finetune.from_pretrained=false)")
        model = model_from_checkpoint(load_checkpoint(ckpt), art.vocab.fingerprint())
    else:
        model = build_model(cfg, art)
    out = cfg.out_dir / subdir
    cfg.echo(out)
    train = assemble_all(art.vocab, art.splits["train"])
    valid = assemble_all(art.vocab, art.splits["valid"]) if "valid" in art.splits else None
    res = finetune_run(fcfg, model, train, art.vocab, valid, out_dir=out)
    logger.info("finetune done in %.1fs, best valid loss %.4f at step %d", res.seconds, res.best_val, res.best_step)
    return res


def load_finetuned(cfg: RunConfig, art: Artifacts, ckpt: str | Path | None = None) -> SummarizationModel:
    path = Path(ckpt) if ckpt else cfg.out_dir / "finetune" / "best.pt"
    if not path.is_file():
        raise UsageError(f"fine-tuned checkpoint not found: {path}; run 'finetune' first")
    return model_from_checkpoint(load_checkpoint(path), art.vocab.fingerprint())


# -- summarize / evaluate -------------------------------------------------------------

def cmd_summarize(cfg: RunConfig, code: str, ckpt: str | Path | None = None) -> str:
    art = load_artifacts(cfg)
    model = load_finetuned(cfg, art, ckpt)
    if not code.strip():
        raise UsageError("empty code input")
    return summarize(model, art.vocab, code, cfg.finetune.beam, cfg.finetune.max_gen_len)


def _read_lines(path: str) -> list[str]:
    if not Path(path).is_file():
        raise UsageError(f"file not found: {path}")
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_report(report: ScoreReport, out: Path, hyps: Sequence[str], refs: Sequence[str],
                 make_figures: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = report.to_table()
    if report.significance:
        table += "\n\n" + "\n".join(f"{m}: p = {s['p']:.4g} ({s['stars']})" for m, s in report.significance.items())
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *METRICS, "hypothesis", "reference"])
        for i, (h, r) in enumerate(zip(hyps, refs)):
            w.writerow([i, *(f"{report.per_sample[m][i]:.6f}" for m in METRICS), h, r])
    if make_figures and hyps:
        figures.plot_score_distributions([report], out / "scores.png")
        for key in report.buckets:
            figures.plot_length_buckets(report, key, out / f"buckets_{key}.png")


def generate_split(model: SummarizationModel, vocab: Vocabulary, split: CorpusSplit, beam: int,
                   max_len: int) -> list[str]:
    pairs = assemble_all(vocab, split)
    return [vocab.decode(generate(model, p.code_ids, beam, max_len).ids) for p in pairs]


def cmd_evaluate(cfg: RunConfig, subdir: str = "eval", ckpt: str | Path | None = None,
                 label: str = "model") -> ScoreReport:
    """Score hypothesis/reference files, or generate on a prepared split."""
    e = cfg.evaluate
    codes = None
    if e.hypotheses or e.references:
        if not (e.hypotheses and e.references):
            raise UsageError("evaluate.hypotheses and evaluate.references must be given together")
        hyps, refs = _read_lines(e.hypotheses), _read_lines(e.references)
        if len(hyps) != len(refs):
            raise UsageError(f"{len(hyps)} hypotheses vs {len(refs)} references")
        if e.codes:
            codes = [json.loads(line)["code"] for line in _read_lines(e.codes)]
    else:
        art = load_artifacts(cfg)
        if e.split not in art.splits:
            raise UsageError(f"split {e.split!r} was not prepared")
        split = art.splits[e.split]
        model = load_finetuned(cfg, art, ckpt)
        hyps = generate_split(model, art.vocab, split, cfg.finetune.beam, cfg.finetune.max_gen_len)
        refs = [s.summary for s in split]
        codes = [s.code for s in split]
    baseline = _read_lines(e.baseline) if e.baseline else None
    if baseline is not None and len(baseline) != len(refs):
        raise UsageError("baseline hypotheses do not align with references")
    report = score_corpus(hyps, refs, codes=codes, label=label, baseline=baseline)
    out = cfg.out_dir / subdir
    cfg.echo(out)
    (out / "hypotheses.txt").write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    write_report(report, out, hyps, refs, e.figures)
    return report


# -- ablate -------------------------------------------------------------------------

ABLATIONS: tuple[tuple[str, ...], ...] = (
    ("awp", "ulm", "mlm"),
    ("ulm", "mlm"),
    ("awp", "ulm"),
    ("awp", "mlm"),
)


def ablation_label(tasks: Sequence[str]) -> str:
    return task_tag(tasks)


def cmd_ablate(cfg: RunConfig) -> tuple[list[tuple[str, dict[str, float]]], dict[str, str]]:
    """Pre-train, fine-tune and evaluate the full task set and each
    leave-one-out variant.  Failures are recorded; finished rows are kept."""
    rows: list[tuple[str, dict[str, float]]] = []
    errors: dict[str, str] = {}
    out = cfg.out_dir / "ablate"
    cfg.echo(out)
    for tasks in ABLATIONS:
        label = ablation_label(tasks)
        slug = label.replace("/", "").replace(", ", "_").replace(" ", "_")
        try:
            res = cmd_pretrain(cfg, tasks, subdir=f"ablate/{slug}/pretrain")
            cmd_finetune(cfg, pretrained=res.checkpoint, subdir=f"ablate/{slug}/finetune")
            rep = cmd_evaluate(cfg, subdir=f"ablate/{slug}/eval",
                               ckpt=cfg.out_dir / "ablate" / slug / "finetune" / "best.pt", label=label)
            rows.append((label, rep.means))
        except (UsageError, ConfigError):
            raise
        except Exception as e:  # keep completed rows
            logger.error("ablation %s failed: %s", label, e)
            errors[label] = f"{type(e).__name__}: {e}"
    title = f"Effect of pre-training tasks (split: {cfg.evaluate.split})"
    text = format_table(rows, title=title)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps({"rows": [{"label": l, **v} for l, v in rows],
                                                   "errors": errors}, indent=1), encoding="utf-8")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["technique", *METRICS])
        for label, vals in rows:
            w.writerow([label, *(f"{vals[m]:.4f}" for m in METRICS)])
    if rows and cfg.evaluate.figures:
        figures.plot_ablation(rows, out / "ablation.png")
    return rows, errors


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sumalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="TOML run configuration")
        p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")
        p.add_argument("-o", "--out", help="run directory (overrides run.out_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
        if name == "prepare":
            p.add_argument("--dedup", action="store_true", help="drop train samples duplicated in test")
        if name == "pretrain":
            p.add_argument("--tasks", help="comma-separated subset of awp,ulm,mlm")
        if name in ("finetune",):
            p.add_argument("--freeze-encoder", action="store_true")
            p.add_argument("--from-scratch", action="store_true", help="skip the pre-trained checkpoint")
            p.add_argument("--checkpoint", help="pre-trained checkpoint to start from")
        if name == "summarize":
            p.add_argument("input", nargs="?", default="-", help="code file, or '-' for standard input")
            p.add_argument("--checkpoint", help="fine-tuned checkpoint")
        if name == "evaluate":
            p.add_argument("--hypotheses")
            p.add_argument("--references")
            p.add_argument("--baseline", help="second hypothesis file for a paired significance test")
            p.add_argument("--checkpoint", help="fine-tuned checkpoint")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"run.out_dir={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "dedup", False):
        overrides.append("data.dedup=true")
    if getattr(args, "tasks", None):
        overrides.append("pretrain.tasks=" + json.dumps([t.strip() for t in args.tasks.split(",") if t.strip()]))
    if getattr(args, "freeze_encoder", False):
        overrides.append("finetune.freeze_encoder=true")
    if getattr(args, "from_scratch", False):
        overrides.append("finetune.from_pretrained=false")
    for key in ("hypotheses", "references", "baseline"):
        if getattr(args, key, None):
            overrides.append(f"evaluate.{key}={json.dumps(getattr(args, key))}")
    return load_config(args.config, overrides)


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "prepare":
        summary = cmd_prepare(cfg)
        print(json.dumps(summary, indent=1, sort_keys=True))
    elif cmd == "pretrain":
        res = cmd_pretrain(cfg)
        last = res.records[-1] if res.records else None
        print(f"pretrain [{res.tag}] steps={len(res.records)} final joint loss="
              f"{last.joint:.6f}" if last else f"pretrain [{res.tag}] no steps")
    elif cmd == "finetune":
        res = cmd_finetune(cfg, pretrained=args.checkpoint)
        print(f"finetune best valid loss={res.best_val:.6f} at step {res.best_step}")
    elif cmd == "summarize":
        if args.input == "-":
            code = sys.stdin.read()
        else:
            if not Path(args.input).is_file():
                raise UsageError(f"input file not found: {args.input}")
            code = Path(args.input).read_text(encoding="utf-8")
        print(cmd_summarize(cfg, code, args.checkpoint))
    elif cmd == "evaluate":
        rep = cmd_evaluate(cfg, ckpt=args.checkpoint)
        print(rep.to_table())
    elif cmd == "ablate":
        rows, errors = cmd_ablate(cfg)
        print(format_table(rows))
        if errors:
            for label, msg in errors.items():
                print(f"{label}: FAILED ({msg})", file=sys.stderr)
            return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError) as e:
        print(f"sumalign {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"sumalign {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
