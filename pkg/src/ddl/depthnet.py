"""Toy monocular depth network predicting non-negative inverse depth."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySplitError, NumericalError
from .numerics import checkpoint, nn
from .numerics import tensor as T
from .numerics.optim import AdamW
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

ROLES = ("teacher", "student")


@dataclass
class InverseDepthMap:
    values: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.shape != self.valid_mask.shape:
            raise ValueError("values and valid_mask must share a shape")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int, rng):
        self.conv1 = nn.Conv2d(cin, cout, 3, rng=rng)
        self.norm = nn.GroupNorm(4 if cout % 4 == 0 else 1, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.norm(self.conv1(x)))))


class DepthNetwork(nn.Module):
    """Three-scale encoder-decoder with skips; image [N,3,H,W] -> inverse depth [N,1,H,W].

    The input is folded 2x2 into channels first, so the scales are H/2, H/4
    and H/8. Softplus keeps the output non-negative.
    """

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 48), image_size: tuple[int, int] = (32, 32),
                 role: str = "teacher", seed: int = 0):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        c0, c1, c2 = channels
        rng = np.random.default_rng(seed)
        self.role = role
        self.image_size = tuple(image_size)
        self.config = {"channels": list(channels), "image_size": list(image_size), "seed": seed}
        self.enc0 = _Block(12, c0, rng)
        self.enc1 = _Block(c0, c1, rng)
        self.enc2 = _Block(c1, c2, rng)
        self.dec1 = _Block(c2 + c1, c1, rng)
        self.dec0 = _Block(c1 + c0, c0, rng)
        self.head = nn.Conv2d(c0, 4, 3, rng=rng, init_scale=0.1)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if tuple(x.shape[-2:]) != self.image_size or x.shape[1] != 3:
            raise ValueError(f"expected [N,3,{self.image_size[0]},{self.image_size[1]}] images, got {x.shape}")
        s0 = self.enc0(T.space_to_depth(x, 2))
        s1 = self.enc1(T.avgpool2x(s0))
        h = self.enc2(T.avgpool2x(s1))
        h = self.dec1(T.concat([T.upsample2x(h), s1], axis=1))
        h = self.dec0(T.concat([T.upsample2x(h), s0], axis=1))
        return T.softplus(T.depth_to_space(self.head(h), 2))

    def as_student(self) -> "DepthNetwork":
        """Exact parameter copy tagged as a student."""
        student = copy.deepcopy(self)
        student.role = "student"
        student.unfreeze()
        return student


def predict_inverse_depth(net: DepthNetwork, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batch inference: [N,3,H,W] (or a single [3,H,W]) -> [N,H,W] (or [H,W])."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or tuple(images.shape[-2:]) != net.image_size:
        raise ValueError(f"image resolution {images.shape[-2:]} != network resolution {net.image_size}")
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size].astype(T.get_default_dtype())
            out.append(net(Tensor(batch)).data[:, 0])
    pred = np.concatenate(out) if out else np.zeros((0,) + net.image_size, dtype=T.get_default_dtype())
    return pred[0] if single else pred


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    decay_at: int = 1600
    decayed_lr: float = 2e-4
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if not 0 < self.decayed_lr <= self.lr:
            raise ValueError("decayed_lr must be in (0, lr]")


def pretrain_teacher(net: DepthNetwork, images: np.ndarray, inv_depth: np.ndarray, valid: np.ndarray,
                     config: PretrainConfig = PretrainConfig(), log_path: Path | None = None,
                     checkpoint_path: Path | None = None) -> DepthNetwork:
    """Supervised SSI training on easy images against ground-truth inverse depth."""
    from .distill import ssi_loss_batch

    images = np.asarray(images)
    if len(images) == 0:
        raise EmptySplitError("teacher pretraining needs at least one easy training image")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(net.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rows = []
    dtype = T.get_default_dtype()
    for it in range(config.iterations):
        if it == config.decay_at:
            opt.lr = config.decayed_lr
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        batch = images[idx]
        target, mask = inv_depth[idx], valid[idx]
        flip = rng.random(len(idx)) < 0.5
        batch = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
        target = np.where(flip[:, None, None], target[..., ::-1], target)
        mask = np.where(flip[:, None, None], mask[..., ::-1], mask)
        pred = net(Tensor(batch.astype(dtype)))
        loss, _ = ssi_loss_batch(pred, target, mask)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite teacher loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        if not opt.step():
            raise NumericalError(f"non-finite teacher gradient at iteration {it}")
        rows.append((it, opt.lr, value))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "lr", "loss"])
            w.writerows((i, repr(lr), repr(v)) for i, lr, v in rows)
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, net.state_dict())
    return net


def save_network(net: DepthNetwork, path) -> str:
    return checkpoint.save(path, net.state_dict())


def load_network(path, channels: Sequence[int] = (16, 32, 48), image_size=(32, 32), role: str = "teacher") -> DepthNetwork:
    net = DepthNetwork(tuple(channels), tuple(image_size), role=role)
    net.load_state_dict(checkpoint.load(path))
    return net
