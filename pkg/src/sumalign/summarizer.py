"""Decoder fine-tuning, beam search and summary generation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .batching import Seq2SeqBatch, bidirectional_mask, collate_seq2seq
from .model import NumericalError, SummarizationModel, check_gradients, save_checkpoint
from .optim import AdamW, warmup_constant
from .pretrain import batch_indices
from .tokenizer import EOS, MASK, MAX_CODE_LEN, MAX_SUMMARY_LEN, PAD, SOS, TokenizedPair, Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    batch_size: int = 32
    lr: float = 5e-4
    steps: int = 2000
    beam: int = 5
    max_gen_len: int = MAX_SUMMARY_LEN
    freeze_encoder: bool = False
    seed: int = 0
    eval_every: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_frac: float = 0.01
    length_norm: bool = False

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size/eval_every must be >= 1 and steps >= 0")


def seq2seq_token_nll(model: SummarizationModel, batch: Seq2SeqBatch) -> torch.Tensor:
    """Per-token negative log-likelihood (B x Ls), zero at PAD targets."""
    enc = model.encode(batch.code_ids, batch.code_attn)
    logits = model.decode_forward(enc, batch.code_ids == PAD, batch.dec_in)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, batch.dec_out.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    return nll * batch.target_mask


def loss_cs(model: SummarizationModel, batch: Seq2SeqBatch) -> torch.Tensor:
    """Sequence negative log-likelihood averaged over the samples in the batch."""
    return seq2seq_token_nll(model, batch).sum(dim=1).mean()


@torch.no_grad()
def token_accuracy(model: SummarizationModel, pairs: Sequence[TokenizedPair], batch_size: int = 64) -> float:
    model.eval()
    hit = total = 0
    for i in range(0, len(pairs), batch_size):
        b = collate_seq2seq(pairs[i:i + batch_size])
        enc = model.encode(b.code_ids, b.code_attn)
        pred = model.decode_forward(enc, b.code_ids == PAD, b.dec_in).argmax(-1)
        m = b.target_mask
        hit += int(((pred == b.dec_out) & m).sum())
        total += int(m.sum())
    return hit / max(total, 1)


@torch.no_grad()
def mean_loss(model: SummarizationModel, pairs: Sequence[TokenizedPair], batch_size: int = 64) -> float:
    """Per-sample mean of the sequence NLL over ``pairs`` (eval mode)."""
    model.eval()
    tot = 0.0
    for i in range(0, len(pairs), batch_size):
        b = collate_seq2seq(pairs[i:i + batch_size])
        tot += float(seq2seq_token_nll(model, b).sum())
    return tot / max(len(pairs), 1)


@dataclass
class FinetuneResult:
    model: SummarizationModel
    train_losses: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("inf")
    checkpoint: Path | None = None
    seconds: float = 0.0


def finetune_run(config: FinetuneConfig, model: SummarizationModel, pairs: Sequence[TokenizedPair],
                 vocab: Vocabulary, valid: Sequence[TokenizedPair] | None = None,
                 out_dir: str | Path | None = None) -> FinetuneResult:
    """Teacher-forced training of encoder + decoder on code -> summary.

    The returned model carries the parameters with the lowest validation
    loss (checked every ``eval_every`` steps and at the last step).  With
    ``freeze_encoder`` the encoder receives no updates at all.
    """
    if not pairs:
        raise ValueError("empty fine-tuning corpus")
    t0 = time.perf_counter()
    valid = list(valid) if valid else list(pairs)
    torch.manual_seed(config.seed)
    enc_params = set(map(id, model.encoder_parameters()))
    for p in model.encoder_parameters():
        p.requires_grad_(not config.freeze_encoder)
    params = [p for p in model.parameters() if not (config.freeze_encoder and id(p) in enc_params)]
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    out = Path(out_dir) if out_dir is not None else None
    rows: list[list] = []
    res = FinetuneResult(model=model)
    best_state = None
    for step in range(1, config.steps + 1):
        model.train()
        idx = batch_indices(len(pairs), config.batch_size, config.seed + 1, step)
        batch = collate_seq2seq([pairs[i] for i in idx])
        for g in opt.param_groups:
            g["lr"] = warmup_constant(step, config.steps, config.lr, config.warmup_frac)
        opt.zero_grad(set_to_none=True)
        loss = loss_cs(model, batch)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite summarization loss at step {step}")
        loss.backward()
        check_gradients(model)
        if config.grad_clip and config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        res.train_losses.append(float(loss.detach()))
        if step % config.eval_every == 0 or step == config.steps:
            v = mean_loss(model, valid)
            res.val_history.append((step, v))
            rows.append([step, repr(res.train_losses[-1]), repr(v)])
            logger.info("finetune step %d train %.4f valid %.4f", step, res.train_losses[-1], v)
            if v < res.best_val:
                res.best_val, res.best_step = v, step
                best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    for p in model.encoder_parameters():
        p.requires_grad_(True)
    model.eval()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "val_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "valid_loss"])
            w.writerows(rows)
        res.checkpoint = out / "best.pt"
        save_checkpoint(res.checkpoint, model, step=res.best_step, vocab_fingerprint=vocab.fingerprint(),
                        tag="finetuned", extra={"best_val": res.best_val})
    res.seconds = time.perf_counter() - t0
    return res


# -- decoding ----------------------------------------------------------------------

@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]
    logp: float
    finished: bool = False


StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


def greedy_search(step_fn: StepFn, eos: int, max_len: int) -> Hypothesis:
    ids: tuple[int, ...] = ()
    logp = 0.0
    while len(ids) < max_len:
        lp = step_fn([ids])[0]
        tok = int(np.argmax(lp))  # first index wins ties
        ids += (tok,)
        logp += float(lp[tok])
        if tok == eos:
            break
    return Hypothesis(ids, logp, True)


def beam_search(step_fn: StepFn, eos: int, beam: int, max_len: int, length_norm: bool = False) -> Hypothesis:
    """Length-synchronous beam search over a next-token log-prob function.

    ``step_fn`` maps a list of equal-length prefixes to an ``n x V`` array
    of log-probabilities (``-inf`` for forbidden tokens).  The ``beam`` best
    extensions survive each step; those ending in ``eos`` or reaching
    ``max_len`` retire to the finished pool.  Equal scores go to the
    lexicographically smaller id sequence.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    def score(h: Hypothesis) -> float:
        return h.logp / len(h.ids) if length_norm and h.ids else h.logp

    live = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    for t in range(max_len):
        lp = np.asarray(step_fn([h.ids for h in live]), dtype=np.float64)
        cands = []
        for h, row in zip(live, lp):
            for tok in np.argsort(-row, kind="stable")[:beam]:
                if np.isfinite(row[tok]):
                    cands.append(Hypothesis(h.ids + (int(tok),), h.logp + float(row[tok])))
        cands.sort(key=lambda h: (-score(h), h.ids))
        live = []
        for h in cands[:beam]:
            if h.ids[-1] == eos or len(h.ids) == max_len:
                finished.append(Hypothesis(h.ids, h.logp, True))
            else:
                live.append(h)
        if not live:
            break
        if not length_norm and finished:
            # log-probs only fall as hypotheses grow
            if max(h.logp for h in finished) > max(h.logp for h in live):
                break
    pool = finished or [Hypothesis(h.ids, h.logp, True) for h in live]
    return min(pool, key=lambda h: (-score(h), h.ids))


BANNED = (PAD, SOS, MASK)


def code_ids_for(vocab: Vocabulary, code: str, max_code_len: int = MAX_CODE_LEN) -> list[int]:
    if not code.strip():
        raise ValueError("cannot summarize empty code")
    return [SOS, *vocab.encode(code)[:max_code_len - 2], EOS]


class ModelStepper:
    """Wraps a model and one encoded snippet as a ``StepFn``."""

    def __init__(self, model: SummarizationModel, code_ids: Sequence[int]):
        self.model = model
        model.eval()
        ids = torch.tensor([list(code_ids)], dtype=torch.long)
        with torch.no_grad():
            self.enc = model.encode(ids, bidirectional_mask(len(code_ids), 0))
        self.pad = ids == PAD

    @torch.no_grad()
    def __call__(self, prefixes: list[tuple[int, ...]]) -> np.ndarray:
        n = len(prefixes)
        dec_in = torch.tensor([(SOS, *p) for p in prefixes], dtype=torch.long)
        enc = self.enc.expand(n, -1, -1)
        logits = self.model.decode_forward(enc, self.pad.expand(n, -1), dec_in)[:, -1].double()
        logits[:, list(BANNED)] = float("-inf")
        return torch.log_softmax(logits, dim=-1).numpy()


def generate(model: SummarizationModel, code_ids: Sequence[int], beam: int = 5,
             max_len: int = MAX_SUMMARY_LEN, length_norm: bool = False) -> Hypothesis:
    return beam_search(ModelStepper(model, code_ids), EOS, beam, max_len, length_norm)


def summarize(model: SummarizationModel, vocab: Vocabulary, code: str, beam: int = 5,
              max_len: int = MAX_SUMMARY_LEN) -> str:
    hyp = generate(model, code_ids_for(vocab, code), beam, max_len)
    return vocab.decode(hyp.ids)


@torch.no_grad()
def export_attention(model: SummarizationModel, vocab: Vocabulary, code: str, summary: str,
                     path: str | Path | None = None, pad_to: int | None = None) -> dict:
    """Per-layer, per-head decoder-to-encoder attention for a teacher-forced pair.

    Rows are summary positions (decoder inputs ``<sos> w_1 ...``), columns
    are code positions; ``pad_to`` right-pads the code to show PAD columns.
    """
    code_ids = code_ids_for(vocab, code)
    summ = [*vocab.encode(summary)[:MAX_SUMMARY_LEN - 1], EOS]
    L = max(len(code_ids), pad_to or 0)
    ids = torch.full((1, L), PAD, dtype=torch.long)
    ids[0, :len(code_ids)] = torch.tensor(code_ids)
    model.eval()
    enc = model.encode(ids, bidirectional_mask(len(code_ids), 0, L))
    layers = [layer.cross_attn for layer in model.decoder.layers]
    for a in layers:
        a.record = True
    try:
        model.decode_forward(enc, ids == PAD, torch.tensor([(SOS, *summ[:-1])]))
        dump = {
            "code_tokens": [vocab.tokens[i] for i in ids[0].tolist()],
            "summary_tokens": [vocab.tokens[i] for i in (SOS, *summ[:-1])],
            "layers": [{"heads": a.last_weights[0].tolist()} for a in layers],
        }
    finally:
        for a in layers:
            a.record = False
            a.last_weights = None
    if path is not None:
        Path(path).write_text(json.dumps(dump), encoding="utf-8")
    return dump
