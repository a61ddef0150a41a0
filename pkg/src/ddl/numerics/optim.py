"""AdamW with decoupled weight decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    skipped_steps: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState) -> bool:
    """Apply one AdamW update in place.

    Returns False (and leaves parameters and moments untouched) when any
    gradient is non-finite.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            log.warning("non-finite gradient at step %d; update skipped", state.t + 1)
            return False

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return True


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        return adamw_step(self.params, [p.grad for p in self.params], self.state)
