"""Variance-preserving noise schedule and the closed-form forward process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients indexed by timestep ``t`` in ``0..T``.

    Index 0 is the conventional clean endpoint (beta=0, alpha_bar=1); the
    diffusion steps proper are ``1..T``.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    @property
    def beta_1(self) -> float:
        return float(self.betas[1])

    @property
    def beta_T(self) -> float:
        return float(self.betas[self.T])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0) used by the ancestral sampler."""
        if t <= 1:
            return 0.0
        return float(self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T}


def make_schedule(T: int = 200, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if not 1 <= T <= 10_000:
        raise ValueError(f"T={T} outside [1, 10000]")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = np.linspace(beta_1, beta_T, T) if T > 1 else [beta_1]
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is an int or one int per leading batch element.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}]")
    abar = schedule.alpha_bars[t_arr]
    if t_arr.ndim == 1:
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps).astype(x0.dtype, copy=False)
