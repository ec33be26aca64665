"""Summary-focused pre-training: AWP, ULM and MLM losses and the joint loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .batching import MASK_RATE, MaskedBatch, collate
from .corpus import ActionWordTable
from .model import NumericalError, SummarizationModel, check_gradients, load_checkpoint, save_checkpoint
from .optim import AdamW, warmup_constant
from .tokenizer import TokenizedPair, Vocabulary

logger = logging.getLogger(__name__)

TASKS = ("awp", "ulm", "mlm")
TASK_LABELS = {"awp": "AWP", "ulm": "ULM", "mlm": "MLM"}
# ablation/table ordering
TAG_ORDER = ("awp", "mlm", "ulm")


@dataclass
class PretrainConfig:
    batch_size: int = 32
    lr: float = 5e-4
    steps: int = 2000
    mask_rate: float = MASK_RATE
    tasks: tuple[str, ...] = TASKS
    seed: int = 0
    checkpoint_every: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_frac: float = 0.01
    awp_input: str = "code"

    def __post_init__(self):
        self.tasks = tuple(t.lower() for t in self.tasks)
        bad = set(self.tasks) - set(TASKS)
        if bad:
            raise ValueError(f"unknown pre-training task(s): {sorted(bad)}")
        if not self.tasks:
            raise ValueError("a pre-training run needs at least one task")
        if not 0.0 < self.mask_rate < 1.0 or not 0.0 < self.lr < 1.0:
            raise ValueError("mask_rate and lr must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


def task_tag(tasks: Sequence[str]) -> str:
    """``"full"`` or the ``"w/o X"`` label of the disabled tasks."""
    missing = [TASK_LABELS[t] for t in TAG_ORDER if t not in tasks]
    return "full" if not missing else ", ".join(f"w/o {m}" for m in missing)


@dataclass
class TaskLossRecord:
    step: int
    losses: dict[str, float]
    joint: float

    def csv_row(self) -> list[str]:
        return [str(self.step)] + [repr(self.losses[t]) if t in self.losses else "" for t in TASKS] + [repr(self.joint)]


CSV_HEADER = ["step", "L_AWP", "L_ULM", "L_MLM", "joint"]


# -- losses --------------------------------------------------------------------

def loss_awp(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over rows."""
    C = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"AWP label outside [0, {C - 1}]")
    return F.cross_entropy(logits, labels)


def _lm_token_losses(batch: MaskedBatch, model: SummarizationModel) -> torch.Tensor:
    enc = model.encode(batch.ids, batch.attn)
    logits = model.lm_logits(enc, batch.target_rows, batch.target_cols)
    return F.cross_entropy(logits, batch.targets, reduction="none")


def ulm_token_losses(batch: MaskedBatch, model: SummarizationModel) -> torch.Tensor:
    if batch.kind != "ulm":
        raise ValueError(f"expected a ulm batch, got {batch.kind}")
    if batch.targets.numel() == 0:
        raise ValueError("ULM batch has an empty summary region")
    return _lm_token_losses(batch, model)


def loss_ulm(batch: MaskedBatch, model: SummarizationModel) -> torch.Tensor:
    """Mean next-summary-token cross-entropy (final ``<eos>`` included)."""
    return ulm_token_losses(batch, model).mean()


def loss_mlm(batch: MaskedBatch, model: SummarizationModel) -> torch.Tensor:
    """Mean cross-entropy over the masked summary positions only."""
    if batch.kind != "mlm":
        raise ValueError(f"expected an mlm batch, got {batch.kind}")
    if any(not s for s in batch.masked_positions):
        raise ValueError("MLM batch row with an empty masked set")
    return _lm_token_losses(batch, model).mean()


def loss_awp_batch(batch: MaskedBatch, model: SummarizationModel) -> torch.Tensor:
    if batch.kind != "awp":
        raise ValueError(f"expected an awp batch, got {batch.kind}")
    enc = model.encode(batch.ids, batch.attn)
    return loss_awp(model.awp_logits(enc), batch.targets)


LOSS_FNS = {"awp": loss_awp_batch, "ulm": loss_ulm, "mlm": loss_mlm}


def task_losses(batches: dict[str, MaskedBatch], model: SummarizationModel) -> dict[str, torch.Tensor]:
    out = {}
    for task in TASKS:
        if task in batches:
            loss = LOSS_FNS[task](batches[task], model)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite {TASK_LABELS[task]} loss")
            out[task] = loss
    return out


# -- batching over a corpus ------------------------------------------------------

def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Indices for 1-based ``step``: consecutive slices of per-epoch permutations.

    Stateless in ``step`` so a resumed run draws the same batches.
    """
    bs = min(batch_size, n)
    start = (step - 1) * bs
    out = []
    perm_cache: dict[int, np.ndarray] = {}
    for k in range(start, start + bs):
        epoch = k // n
        if epoch not in perm_cache:
            perm_cache[epoch] = np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)
        out.append(int(perm_cache[epoch][k % n]))
    return out


def make_task_batches(pairs: Sequence[TokenizedPair], tasks: Sequence[str], table: ActionWordTable,
                      seed: int, step: int, mask_rate: float = MASK_RATE,
                      awp_input: str = "code") -> dict[str, MaskedBatch]:
    return {t: collate(pairs, t, table, seed=[seed, step, TASKS.index(t)], rate=mask_rate,
                       awp_input=awp_input)
            for t in tasks}


def joint_step(batches: dict[str, MaskedBatch], model: SummarizationModel, optimizer: torch.optim.Optimizer,
               step: int = 0, grad_clip: float = 1.0) -> TaskLossRecord:
    """Sum the enabled task losses, backprop once, take one optimizer step."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = task_losses(batches, model)
    joint = sum(losses.values())
    joint.backward()
    check_gradients(model)
    if grad_clip and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    rec = {t: float(v.detach()) for t, v in losses.items()}
    return TaskLossRecord(step=step, losses=rec, joint=float(joint.detach()))


@dataclass
class PretrainResult:
    model: SummarizationModel
    records: list[TaskLossRecord] = field(default_factory=list)
    checkpoint: Path | None = None
    tag: str = "full"
    seconds: float = 0.0


def make_optimizer(params, lr: float, weight_decay: float) -> AdamW:
    return AdamW(params, lr=lr, weight_decay=weight_decay)


def pretrain_run(config: PretrainConfig, pairs: Sequence[TokenizedPair], vocab: Vocabulary,
                 table: ActionWordTable, model: SummarizationModel, out_dir: str | Path | None = None,
                 resume_from: str | Path | None = None) -> PretrainResult:
    """Jointly train the shared encoder on the enabled tasks.

    Writes ``loss.csv``, periodic ``ckpt_step<N>.pt`` files and ``final.pt``
    (tagged with the enabled-task set) under ``out_dir`` when given.
    """
    if not pairs:
        raise ValueError("empty pre-training corpus")
    t0 = time.perf_counter()
    tag = task_tag(config.tasks)
    torch.manual_seed(config.seed)
    opt = make_optimizer(model.parameters(), config.lr, config.weight_decay)
    start = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["torch_rng"])
        start = payload["step"]

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        kept: list[list[str]] = []
        if start and (out / "loss.csv").exists():
            # drop rows logged after the checkpoint we resume from
            with open(out / "loss.csv", newline="") as old:
                kept = [r for r in list(csv.reader(old))[1:] if int(r[0]) <= start]
        fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(kept)

    records: list[TaskLossRecord] = []
    fp = vocab.fingerprint()
    try:
        for step in range(start + 1, config.steps + 1):
            idx = batch_indices(len(pairs), config.batch_size, config.seed, step)
            sub = [pairs[i] for i in idx]
            batches = make_task_batches(sub, config.tasks, table, config.seed, step,
                                        config.mask_rate, config.awp_input)
            for g in opt.param_groups:
                g["lr"] = warmup_constant(step, config.steps, config.lr, config.warmup_frac)
            rec = joint_step(batches, model, opt, step, config.grad_clip)
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.csv_row())
            if step % 100 == 0 or step == 1:
                logger.info("pretrain step %d joint %.4f %s", step, rec.joint,
                            {TASK_LABELS[k]: round(v, 4) for k, v in rec.losses.items()})
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out / f"ckpt_step{step}.pt", model, step=step, optimizer=opt,
                                vocab_fingerprint=fp, tag=tag, extra={"tasks": list(config.tasks)})
    finally:
        if fh is not None:
            fh.close()

    ckpt = None
    if out is not None:
        ckpt = out / "final.pt"
        save_checkpoint(ckpt, model, step=config.steps, optimizer=opt, vocab_fingerprint=fp, tag=tag,
                        extra={"tasks": list(config.tasks)})
    model.eval()
    return PretrainResult(model=model, records=records, checkpoint=ckpt, tag=tag,
                          seconds=time.perf_counter() - t0)


def uniform_loss(n: int) -> float:
    return math.log(n)
