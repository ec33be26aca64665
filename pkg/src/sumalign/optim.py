"""AdamW with decoupled weight decay, plus the warmup schedule."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import torch


class AdamW(torch.optim.Optimizer):
    def __init__(self, params: Iterable, lr: float = 5e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"Invalid betas: {betas}")
        if eps <= 0 or weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, (beta1, beta2) = group["lr"], group["betas"]
            eps, wd = group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                adamw_step(p, p.grad, state["m"], state["v"], state["step"],
                           lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=wd)
        return loss


def adamw_step(p: torch.Tensor, grad: torch.Tensor, m: torch.Tensor, v: torch.Tensor, step: int, *,
               lr: float, beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    """One in-place AdamW update of ``p`` (and its moment buffers)."""
    p.mul_(1.0 - lr * weight_decay)
    m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)


def warmup_constant(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.01) -> float:
    """Linear warmup over ``warmup_frac`` of training, then constant ``peak_lr``.

    ``step`` counts from 1.
    """
    warm = max(1, round(warmup_frac * total_steps))
    return peak_lr * min(1.0, step / warm)
