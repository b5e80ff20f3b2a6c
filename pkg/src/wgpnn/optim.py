"""Adam with bias correction over named parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from wgpnn.errors import NumericalError


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one Adam update in place.

    ``params`` and ``grads`` map block names to tensors of equal shape. A
    missing gradient counts as zero. Returns ``(params, state)``.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name!r} {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return params, state
