"""Noise-prediction training for the denoiser and its control branch."""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from ..numerics import tensor as T
from ..numerics.optim import AdamW
from ..numerics.tensor import Tensor
from .schedule import NoiseSchedule, forward_diffuse


def to_model_range(images: np.ndarray) -> np.ndarray:
    """[0,1] images -> [-1,1] diffusion space."""
    return 2.0 * np.asarray(images) - 1.0


def from_model_range(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)


def sample_noise_batch(rng: np.random.Generator, x0: np.ndarray, schedule: NoiseSchedule):
    """Draw per-element t ~ U{1..T} and standard-normal noise."""
    t = rng.integers(1, schedule.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    return t, eps


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def noise_prediction_loss(model, x0, t, eps, schedule: NoiseSchedule, cond=None) -> Tensor:
    dtype = T.get_default_dtype()
    x0 = np.asarray(x0, dtype=dtype)
    eps = np.asarray(eps, dtype=dtype)
    xt = forward_diffuse(x0, t, eps, schedule)
    pred = model(Tensor(xt), t) if cond is None else model(Tensor(xt), t, Tensor(cond))
    return _mse(pred, eps)


def _step(loss: Tensor, optimizer: AdamW) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}; step aborted")
    optimizer.zero_grad()
    loss.backward()
    if not optimizer.step():
        raise NumericalError("non-finite gradient; step aborted")
    return value


def train_denoiser_step(model, optimizer: AdamW, x0, t, eps, schedule: NoiseSchedule) -> float:
    """One MSE noise-prediction step on a batch; returns the pre-step loss."""
    return _step(noise_prediction_loss(model, x0, t, eps, schedule), optimizer)


def train_control_step(model, optimizer: AdamW, x0, cond, t, eps, schedule: NoiseSchedule) -> float:
    """Same objective with conditioning; only the control branch is in ``optimizer``."""
    return _step(noise_prediction_loss(model, x0, t, eps, schedule, cond), optimizer)


def evaluate_loss(model, images: np.ndarray, schedule: NoiseSchedule, seed: int,
                  cond: np.ndarray | None = None, batch_size: int = 64, repeats: int = 2) -> float:
    """Held-out noise-prediction MSE with fixed (t, eps) draws per seed.

    Timesteps are stratified over 1..T so the estimate has low variance.
    """
    rng = np.random.default_rng(seed)
    x0_all = to_model_range(images)
    n = len(x0_all)
    total, count = 0.0, 0
    with T.no_grad():
        for _ in range(repeats):
            t_all = 1 + (np.arange(n) * schedule.T // max(n, 1) + rng.integers(0, schedule.T)) % schedule.T
            eps_all = rng.standard_normal(x0_all.shape)
            for start in range(0, n, batch_size):
                sl = slice(start, start + batch_size)
                c = None if cond is None else cond[sl]
                loss = noise_prediction_loss(model, x0_all[sl], t_all[sl], eps_all[sl], schedule, c)
                k = len(x0_all[sl])
                total += loss.item() * k
                count += k
    return total / count
