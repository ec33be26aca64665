"""Shared transformer encoder, AWP/LM heads and the summary decoder.

Pre-norm transformer blocks with learned absolute position embeddings.
Attention takes a boolean visibility tensor (``True`` = may attend); hidden
logits at invisible cells are set to ``-inf`` before the softmax.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import MAX_CODE_LEN, MAX_SUMMARY_LEN, PAD


class NumericalError(RuntimeError):
    """Raised when activations, losses or gradients stop being finite."""


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int = 41
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 512
    max_len: int = MAX_CODE_LEN + MAX_SUMMARY_LEN
    max_target_len: int = MAX_SUMMARY_LEN + 1
    dec_layers: int | None = None
    dropout: float = 0.1
    tie_lm_head: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size <= 0 or self.n_classes <= 0:
            raise ValueError("vocab_size and n_classes must be positive")

    @property
    def n_dec_layers(self) -> int:
        return self.n_layers if self.dec_layers is None else self.dec_layers

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _as_batch_mask(vis: torch.Tensor, batch: int) -> torch.Tensor:
    if vis.dim() == 2:
        vis = vis.unsqueeze(0).expand(batch, -1, -1)
    return vis


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)
        self.record = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, mem: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        B, Lq, D = x.shape
        Lk = mem.shape[1]
        h, dh = self.n_heads, self.d_head
        q = self.q(x).view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Lk, h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Lk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~vis.unsqueeze(1), float("-inf"))
        w = torch.softmax(scores, dim=-1)
        if self.record:
            self.last_weights = w.detach()
        out = self.drop(w) @ v
        return self.o(out.transpose(1, 2).reshape(B, Lq, D))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, vis):
        y = self.ln1(x)
        x = x + self.drop(self.attn(y, y, vis))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mem, self_vis, cross_vis):
        y = self.ln1(x)
        x = x + self.drop(self.self_attn(y, y, self_vis))
        x = x + self.drop(self.cross_attn(self.ln2(x), mem, cross_vis))
        return x + self.drop(self.ffn(self.ln3(x)))


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations in {where}")


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        return self.tok(ids) + self.pos(pos)

    def forward(self, ids: torch.Tensor, vis: torch.Tensor,
                embeddings: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed(ids) if embeddings is None else embeddings
        x = self.drop(x)
        vis = _as_batch_mask(vis, x.shape[0])
        for i, layer in enumerate(self.layers):
            x = layer(x, vis)
            _check_finite(x, f"encoder layer {i}")
        return self.ln_f(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_target_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        return self.tok(ids) + self.pos(pos)

    def forward(self, ids, mem, mem_pad, embeddings=None):
        x = self.embed(ids) if embeddings is None else embeddings
        x = self.drop(x)
        B, Lt = ids.shape
        self_vis = torch.ones(Lt, Lt, dtype=torch.bool, device=ids.device).tril()
        self_vis = self_vis.unsqueeze(0).expand(B, -1, -1)
        cross_vis = (~mem_pad).unsqueeze(1).expand(-1, Lt, -1)
        for i, layer in enumerate(self.layers):
            x = layer(x, mem, self_vis, cross_vis)
            _check_finite(x, f"decoder layer {i}")
        logits = self.out(self.ln_f(x))
        _check_finite(logits, "decoder output")
        return logits


class SummarizationModel(nn.Module):
    """Shared encoder + AWP head + LM head + decoder.

    The three pre-training tasks use ``encoder`` with ``awp_head`` or
    ``lm_head``; fine-tuning uses ``encoder`` with ``decoder``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.awp_head = nn.Linear(cfg.d_model, cfg.n_classes)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        if cfg.tie_lm_head:
            self.lm_head.weight = self.encoder.tok.weight
        self.decoder = Decoder(cfg)
        self.reset_parameters()

    def reset_parameters(self, seed: int | None = None) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed if seed is None else seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if ".ln" in name or name.startswith("ln") or "ln_f" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.02)

    # -- the operations the pipeline calls -----------------------------------

    def encode(self, ids: torch.Tensor, vis: torch.Tensor, embeddings=None) -> torch.Tensor:
        return self.encoder(ids, vis, embeddings)

    def awp_logits(self, enc: torch.Tensor) -> torch.Tensor:
        if enc.dim() != 3 or enc.shape[-1] != self.cfg.d_model:
            raise ValueError(f"expected B x L x {self.cfg.d_model} encoding, got {tuple(enc.shape)}")
        return self.awp_head(enc[:, 0])

    def lm_logits(self, enc: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        if enc.dim() != 3 or enc.shape[-1] != self.cfg.d_model:
            raise ValueError(f"expected B x L x {self.cfg.d_model} encoding, got {tuple(enc.shape)}")
        if rows.numel() == 0:
            return enc.new_zeros(0, self.cfg.vocab_size)
        return self.lm_head(enc[rows, cols])

    def decode_forward(self, e_code: torch.Tensor, code_pad: torch.Tensor,
                       dec_in: torch.Tensor, embeddings=None) -> torch.Tensor:
        return self.decoder(dec_in, e_code, code_pad, embeddings)

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("encoder.")]


def encode(model: SummarizationModel, ids, attn):
    return model.encode(ids, attn)


def awp_logits(model: SummarizationModel, encoding):
    return model.awp_logits(encoding)


def lm_logits(model: SummarizationModel, encoding, rows, cols):
    return model.lm_logits(encoding, rows, cols)


def decode_forward(model: SummarizationModel, e_code, code_ids, dec_in):
    return model.decode_forward(e_code, code_ids == PAD, dec_in)


def check_gradients(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "sumalign-checkpoint-v1"


def save_checkpoint(path: str | Path, model: SummarizationModel, *, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, vocab_fingerprint: str = "",
                    tag: str = "", extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "vocab_fingerprint": vocab_fingerprint,
        "tag": tag,
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return payload


def model_from_checkpoint(payload: dict, vocab_fingerprint: str | None = None) -> SummarizationModel:
    if vocab_fingerprint is not None and payload["vocab_fingerprint"] != vocab_fingerprint:
        raise ValueError(
            f"vocabulary mismatch: checkpoint was trained with vocab {payload['vocab_fingerprint']}, "
            f"got {vocab_fingerprint}")
    model = SummarizationModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model
