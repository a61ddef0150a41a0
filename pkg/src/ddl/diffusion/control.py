"""Depth/condition control branch attached to a frozen denoiser.

The locked denoiser keeps its parameters. A trainable copy of its encoder
reads the noisy image plus a hint computed from the conditioning planes; its
features pass through zero-initialised 1x1 convolutions and are added to the
locked encoder's features before the locked decoder runs.
"""
from __future__ import annotations

import copy

import numpy as np

from ..numerics import nn
from ..numerics import tensor as T
from ..numerics.tensor import Tensor
from ..scenegen import ConditionTag
from .unet import Denoiser


def condition_planes(inv_depth: np.ndarray, tag, conditions) -> np.ndarray:
    """Stack normalized inverse depth with one-hot tag planes: [1+|C|, H, W].

    ``tag=None`` gives all-zero tag planes (the unperturbed / easy setting).
    """
    inv_depth = np.asarray(inv_depth, dtype=np.float64)
    if inv_depth.ndim != 2:
        raise ValueError("inverse depth must be a 2-D map")
    planes = np.zeros((1 + len(conditions),) + inv_depth.shape)
    planes[0] = inv_depth
    if tag is not None:
        tag = ConditionTag.parse(tag)
        if tag not in conditions:
            raise ValueError(f"condition {tag.value!r} not in configured set")
        planes[1 + list(conditions).index(tag)] = 1.0
    return planes


class ControlBranch(nn.Module):
    def __init__(self, denoiser: Denoiser, cond_channels: int, seed: int = 1):
        rng = np.random.default_rng(seed)
        c0, c1 = denoiser.config["channels"]
        self.patch = denoiser.patch
        cond_channels *= self.patch * self.patch
        self.time = copy.deepcopy(denoiser.time)
        self.encoder = copy.deepcopy(denoiser.encoder)
        self.hint_in = nn.Conv2d(cond_channels, c0, 3, rng=rng)
        self.hint_mid = nn.Conv2d(c0, c0, 3, rng=rng)
        self.hint_out = nn.ZeroConv2d(c0, c0)
        self.zero_convs = [nn.ZeroConv2d(c0, c0), nn.ZeroConv2d(c1, c1), nn.ZeroConv2d(c1, c1)]
        self.unfreeze()

    def hint(self, cond: Tensor) -> Tensor:
        if self.patch > 1:
            cond = T.space_to_depth(cond, self.patch)
        return self.hint_out(T.silu(self.hint_mid(T.silu(self.hint_in(cond)))))

    def forward(self, x: Tensor, t, cond: Tensor, hint: Tensor | None = None) -> list[Tensor]:
        # x arrives already folded by the locked denoiser
        if hint is None:
            hint = self.hint(cond)
        feats = self.encoder(x, self.time(t), hint)
        return [z(f) for z, f in zip(self.zero_convs, feats)]

    def is_untrained(self) -> bool:
        return all(not np.any(z.weight.data) and not np.any(z.bias.data) for z in self.zero_convs)


class ControlledDenoiser(nn.Module):
    """Locked denoiser + trainable control branch; ``forward(x, t, cond)``."""

    def __init__(self, locked: Denoiser, conditions, seed: int = 1):
        self.conditions = tuple(ConditionTag.parse(c) for c in conditions)
        self.locked = locked.freeze()
        self.control = ControlBranch(locked, 1 + len(self.conditions), seed=seed)

    @property
    def cond_channels(self) -> int:
        return 1 + len(self.conditions)

    def trainable_parameters(self):
        return self.control.trainable_parameters()

    def forward(self, x: Tensor, t, cond, hint: Tensor | None = None) -> Tensor:
        """``hint`` may carry ``control.hint(cond)`` computed once for repeated calls."""
        if cond is None:
            raise ValueError("a controlled model needs conditioning planes")
        x = T.as_tensor(x)
        cond = T.as_tensor(cond)
        if cond.ndim != 4 or cond.shape[0] != x.shape[0] or cond.shape[2:] != x.shape[2:]:
            raise ValueError(f"conditioning shape {cond.shape} does not match image batch {x.shape}")
        if cond.shape[1] != self.cond_channels:
            raise ValueError(f"expected {self.cond_channels} conditioning channels, got {cond.shape[1]}")
        xf = self.locked.fold(x)
        temb = self.locked.time(t)
        feats = self.locked.encoder(xf, temb)
        extra = self.control(xf, t, cond, hint)
        return self.locked.unfold(self.locked.decoder([f + e for f, e in zip(feats, extra)], temb))


def attach_control(denoiser: Denoiser, conditions, seed: int = 1) -> ControlledDenoiser:
    """Freeze ``denoiser`` and wrap it with a fresh zero-initialised control branch."""
    return ControlledDenoiser(denoiser, conditions, seed=seed)
