"""AdamW with decoupled weight decay, warmup-cosine schedule, global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class OptimizerStateError(ValueError):
    pass


@dataclass(frozen=True)
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor]) -> AdamWState:
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamWState, lr: float,
               hyper: AdamWHyper = AdamWHyper()) -> None:
    """One in-place update. A ``None`` gradient is treated as zero."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise OptimizerStateError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise OptimizerStateError(f"moment shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        p.data -= lr * (update + hyper.weight_decay * p.data)


def warmup_cosine(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: list[np.ndarray | None], max_norm: float) -> tuple[list[np.ndarray | None], float, float]:
    """Scale gradients so their joint L2 norm is at most ``max_norm``.

    Returns the clipped gradients, the norm before clipping and the norm after.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if total <= max_norm or total == 0.0:
        return grads, total, total
    scale = max_norm / total
    clipped = [None if g is None else g * scale for g in grads]
    after = math.sqrt(sum(float((g * g).sum()) for g in clipped if g is not None))
    return clipped, total, after
