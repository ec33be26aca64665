"""Input sequences, summary masking, attention masks and padded batches.

Every row of a ULM/MLM batch is ``<sos> code <eos> summary <eos>`` followed
by PAD; an AWP row carries the code region only (unless the literal
code+summary reading is requested).  Visibility matrices are boolean with
``True`` meaning "row position may attend to column position".  PAD
columns are never visible; PAD rows see every real position so the
softmax over them stays well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import ActionWordTable
from .tokenizer import EOS, MASK, PAD, SOS, TokenizedPair, SPECIAL_TOKENS

KINDS = ("ulm", "mlm", "awp")
MASK_RATE = 0.15


def mask_count(maskable: int, rate: float = MASK_RATE) -> int:
    """Round-half-up of ``rate * maskable`` with a floor of one."""
    return max(1, math.floor(rate * maskable + 0.5))


def _maskable_positions(summary_ids: Sequence[int]) -> list[int]:
    return [i for i, t in enumerate(summary_ids) if t >= len(SPECIAL_TOKENS)]


def mask_summary(pair: TokenizedPair, rate: float = MASK_RATE,
                 seed: int | Sequence[int] = 0) -> tuple[list[int], list[int], list[int]]:
    """Replace a seeded random subset of summary words by ``<mask>``.

    Returns ``(masked_summary_ids, positions, targets)``; positions index
    into the summary region and are sorted.  The code region is untouched.
    """
    ids = list(pair.summary_ids)
    cand = _maskable_positions(ids)
    if not cand:
        raise ValueError("summary has no maskable tokens")
    n = mask_count(len(cand), rate)
    rng = np.random.default_rng(seed)
    chosen = sorted(int(c) for c in rng.choice(cand, size=n, replace=False))
    targets = [ids[p] for p in chosen]
    for p in chosen:
        ids[p] = MASK
    return ids, chosen, targets


def ulm_mask(code_len: int, summary_len: int, total_len: int | None = None) -> torch.Tensor:
    """Prefix-LM visibility: code is bidirectional and blind to the summary,
    summary position ``j`` sees all code and summary positions ``<= j``."""
    if code_len < 1 or summary_len < 1:
        raise ValueError("ulm_mask needs code_len >= 1 and summary_len >= 1")
    real = code_len + summary_len
    total = real if total_len is None else total_len
    if total < real:
        raise ValueError("total_len shorter than code_len + summary_len")
    i = torch.arange(total).unsqueeze(1)
    j = torch.arange(total).unsqueeze(0)
    vis = (j < code_len) | ((i >= code_len) & (j <= i))
    vis &= j < real
    vis[real:, :real] = True
    return vis


def bidirectional_mask(code_len: int, summary_len: int, total_len: int | None = None) -> torch.Tensor:
    real = code_len + summary_len
    total = real if total_len is None else total_len
    if total < real:
        raise ValueError("total_len shorter than code_len + summary_len")
    vis = torch.zeros(total, total, dtype=torch.bool)
    vis[:, :real] = True
    return vis


def causal_mask(length: int) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool).tril()


def mask_to_grid(vis: torch.Tensor) -> str:
    """Render a visibility matrix as rows of 0/1 characters."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in vis.tolist())


@dataclass
class MaskedBatch:
    """A padded batch for one pre-training task.

    ``target_rows``/``target_cols`` select the hidden states that make a
    prediction and ``targets`` holds what they must predict: the original
    ids at masked positions (mlm), the next summary id (ulm), or the
    action-word class (awp, read off the ``<sos>`` slot).
    """

    kind: str
    ids: torch.Tensor            # B x L, long
    attn: torch.Tensor           # B x L x L, bool
    code_lens: list[int]
    summary_lens: list[int]
    masked_positions: list[list[int]]
    target_rows: torch.Tensor
    target_cols: torch.Tensor
    targets: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def pad_mask(self) -> torch.Tensor:
        return self.ids == PAD


def collate(pairs: Sequence[TokenizedPair], kind: str, table: ActionWordTable | None = None,
            seed: int | Sequence[int] = 0, rate: float = MASK_RATE,
            vocab_size: int | None = None, awp_input: str = "code") -> MaskedBatch:
    """Pad ``pairs`` to the batch maximum length and attach the task's mask.

    MLM rows are masked with per-row seeds derived from ``seed`` so the
    batch is a pure function of its arguments.  ``awp_input="code+summary"``
    feeds AWP the full (unmasked) input sequence instead of the code only.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if not pairs:
        raise ValueError("cannot collate an empty batch")
    if kind == "awp" and table is None:
        raise ValueError("awp batches need an action-word table")
    if awp_input not in ("code", "code+summary"):
        raise ValueError(f"unknown awp_input {awp_input!r}")
    if vocab_size is not None:
        for p in pairs:
            for t in (*p.code_ids, *p.summary_ids):
                if not 0 <= t < vocab_size:
                    raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")

    base_seed = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    rows: list[list[int]] = []
    code_lens, summ_lens, masked = [], [], []
    t_rows, t_cols, targets = [], [], []
    for r, p in enumerate(pairs):
        code = list(p.code_ids)
        summ = list(p.summary_ids)
        cl = len(code)
        if kind == "awp":
            if awp_input == "code":
                summ = []
            t_rows.append(r)
            t_cols.append(0)
            targets.append(table.label_of(p.action_word) if p.action_word else table.other_id)
            masked.append([])
        elif kind == "mlm":
            summ, pos, tgt = mask_summary(p, rate, seed=base_seed + [r])
            abs_pos = [cl + q for q in pos]
            masked.append(abs_pos)
            t_rows.extend([r] * len(abs_pos))
            t_cols.extend(abs_pos)
            targets.extend(tgt)
        else:  # ulm: hidden state at cl-1+i predicts summary token i
            t_rows.extend([r] * len(summ))
            t_cols.extend(range(cl - 1, cl - 1 + len(summ)))
            targets.extend(summ)
            masked.append([])
        rows.append(code + summ)
        code_lens.append(cl)
        summ_lens.append(len(summ))

    L = max(len(x) for x in rows)
    ids = torch.full((len(rows), L), PAD, dtype=torch.long)
    attn = torch.zeros(len(rows), L, L, dtype=torch.bool)
    for r, x in enumerate(rows):
        ids[r, :len(x)] = torch.tensor(x, dtype=torch.long)
        if kind == "ulm":
            attn[r] = ulm_mask(code_lens[r], summ_lens[r], L)
        else:
            attn[r] = bidirectional_mask(code_lens[r], summ_lens[r], L)

    return MaskedBatch(
        kind=kind, ids=ids, attn=attn, code_lens=code_lens, summary_lens=summ_lens,
        masked_positions=masked,
        target_rows=torch.tensor(t_rows, dtype=torch.long),
        target_cols=torch.tensor(t_cols, dtype=torch.long),
        targets=torch.tensor(targets, dtype=torch.long),
    )


@dataclass
class Seq2SeqBatch:
    """Code encoder input plus teacher-forced decoder input/targets."""

    code_ids: torch.Tensor        # B x Lc
    code_attn: torch.Tensor       # B x Lc x Lc
    dec_in: torch.Tensor          # B x Ls, starts with <sos>
    dec_out: torch.Tensor         # B x Ls, ends with <eos>, PAD after

    @property
    def target_mask(self) -> torch.Tensor:
        return self.dec_out != PAD


def collate_seq2seq(pairs: Sequence[TokenizedPair]) -> Seq2SeqBatch:
    if not pairs:
        raise ValueError("cannot collate an empty batch")
    Lc = max(len(p.code_ids) for p in pairs)
    Ls = max(len(p.summary_ids) for p in pairs)
    B = len(pairs)
    code = torch.full((B, Lc), PAD, dtype=torch.long)
    attn = torch.zeros(B, Lc, Lc, dtype=torch.bool)
    dec_in = torch.full((B, Ls), PAD, dtype=torch.long)
    dec_out = torch.full((B, Ls), PAD, dtype=torch.long)
    for r, p in enumerate(pairs):
        cl, sl = len(p.code_ids), len(p.summary_ids)
        code[r, :cl] = torch.tensor(p.code_ids)
        attn[r] = bidirectional_mask(cl, 0, Lc)
        dec_in[r, :sl] = torch.tensor((SOS, *p.summary_ids[:-1]))
        dec_out[r, :sl] = torch.tensor(p.summary_ids)
    return Seq2SeqBatch(code, attn, dec_in, dec_out)


__all__ = [
    "KINDS", "MASK_RATE", "MaskedBatch", "Seq2SeqBatch", "bidirectional_mask", "causal_mask",
    "collate", "collate_seq2seq", "mask_count", "mask_summary", "mask_to_grid", "ulm_mask",
    "EOS", "SOS", "PAD", "MASK",
]
