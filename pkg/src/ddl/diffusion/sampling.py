"""Ancestral sampling and hard-image generation."""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from ..numerics import tensor as T
from ..numerics.tensor import Tensor
from ..scenegen import DepthMap, normalized_inverse_depth
from .control import ControlledDenoiser, condition_planes
from .schedule import NoiseSchedule
from .train import from_model_range


def sample_streams(seeds: Sequence[int]) -> list[np.random.Generator]:
    return [np.random.default_rng(int(s)) for s in seeds]


def reverse_sample(model, shape, schedule: NoiseSchedule, seeds: Sequence[int],
                   cond: np.ndarray | None = None, return_raw: bool = False) -> np.ndarray:
    """Denoise x_T ~ N(0, I) down to x_0; one independent RNG stream per sample.

    Each stream first draws its x_T, then one noise field per step t=T..2.
    Returns images in [0,1] (clamped only after the last step), or the raw
    x_0 when ``return_raw`` is set.
    """
    seeds = list(seeds)
    n = len(seeds)
    shape = tuple(shape)
    controlled = isinstance(model, ControlledDenoiser)
    if controlled and cond is None:
        raise ValueError("controlled model requires depth/tag conditioning")
    if not controlled and cond is not None:
        raise ValueError("conditioning given to an unconditional model")
    streams = sample_streams(seeds)
    dtype = T.get_default_dtype()
    x = np.stack([g.standard_normal(shape) for g in streams]).astype(dtype)
    cond_t = None if cond is None else Tensor(np.asarray(cond, dtype=dtype))
    with T.no_grad():
        # the conditioning is fixed for the whole chain, so its hint is too
        hint = model.control.hint(cond_t) if controlled else None
        for t in range(schedule.T, 0, -1):
            tt = np.full(n, t)
            eps = (model(Tensor(x), tt) if cond_t is None else model(Tensor(x), tt, cond_t, hint)).data
            beta, alpha, abar = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
            mean = (x - (beta / np.sqrt(1.0 - abar)) * eps) / np.sqrt(alpha)
            if t > 1:
                sigma = np.sqrt(schedule.posterior_variance(t))
                z = np.stack([g.standard_normal(shape) for g in streams])
                x = (mean + sigma * z).astype(dtype)
            else:
                x = mean.astype(dtype)
    return x if return_raw else from_model_range(x)


def generate_hard(model: ControlledDenoiser, depths: Sequence[DepthMap], tags, seeds: Sequence[int],
                  schedule: NoiseSchedule, batch_size: int = 64) -> np.ndarray:
    """Generate challenging images that follow each scene's depth under its tag.

    ``tags`` is one tag per depth map (``None`` = unperturbed). Results do not
    depend on ``batch_size`` beyond floating-point reassociation.
    """
    if model.control.is_untrained():
        warnings.warn("control branch is untrained; generated images ignore the conditioning",
                      RuntimeWarning, stacklevel=2)
    depths, tags, seeds = list(depths), list(tags), list(seeds)
    if not (len(depths) == len(tags) == len(seeds)):
        raise ValueError("depths, tags and seeds must have equal length")
    out = []
    for start in range(0, len(depths), batch_size):
        sl = slice(start, start + batch_size)
        cond = np.stack([condition_planes(normalized_inverse_depth(d), tag, model.conditions)
                         for d, tag in zip(depths[sl], tags[sl])])
        shape = (model.locked.config["image_channels"],) + cond.shape[2:]
        out.append(reverse_sample(model, shape, schedule, seeds[sl], cond=cond))
    return np.concatenate(out) if out else np.zeros((0,))


def _sobel_magnitude(img: np.ndarray) -> np.ndarray:
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def edge_correlation(image: np.ndarray, inv_depth: np.ndarray) -> float:
    """Pearson correlation of Sobel edge strength in an image and in an inverse-depth map.

    A cheap check that a generated image puts its edges where the depth
    discontinuities are. Returns 0 when either edge map is constant.
    """
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=0) if image.ndim == 3 else image
    a = _sobel_magnitude(gray).ravel()
    b = _sobel_magnitude(inv_depth).ravel()
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0
