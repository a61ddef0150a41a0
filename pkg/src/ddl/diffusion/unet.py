"""Small three-level U-Net noise predictor.

The image is first folded 2x2 into channels (pixel unshuffle), so the three
levels run at H/2, H/4 and H/8 with wider, BLAS-friendlier convolutions.
"""
from __future__ import annotations

import numpy as np

from ..numerics import nn
from ..numerics import tensor as T
from ..numerics.tensor import Tensor


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 4 if channels % 4 == 0 else 1


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, rng):
        self.dim = dim
        self.proj = nn.Linear(dim, dim, rng=rng)

    def forward(self, t) -> Tensor:
        feats = Tensor(nn.sinusoidal_embedding(np.asarray(t).reshape(-1), self.dim))
        return T.silu(self.proj(feats))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, rng):
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, rng=rng)
        self.temb = nn.Linear(tdim, cout, rng=rng)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng=rng)
        self.skip = nn.Conv2d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        n, c = h.shape[:2]
        h = h + self.temb(temb).reshape(n, c, 1, 1)
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Encoder(nn.Module):
    """Down path; returns the features at the three injection points."""

    def __init__(self, in_ch: int, ch: tuple[int, int], tdim: int, rng):
        c0, c1 = ch
        self.conv_in = nn.Conv2d(in_ch, c0, 3, rng=rng)
        self.block0 = ResBlock(c0, c0, tdim, rng)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1, rng=rng)
        self.block1 = ResBlock(c1, c1, tdim, rng)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1, rng=rng)
        self.mid = ResBlock(c1, c1, tdim, rng)

    def forward(self, x: Tensor, temb: Tensor, hint: Tensor | None = None) -> list[Tensor]:
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        s0 = self.block0(h, temb)
        s1 = self.block1(self.down0(s0), temb)
        mid = self.mid(self.down1(s1), temb)
        return [s0, s1, mid]


class Decoder(nn.Module):
    def __init__(self, out_ch: int, ch: tuple[int, int], tdim: int, rng):
        c0, c1 = ch
        self.up1 = ResBlock(2 * c1, c1, tdim, rng)
        self.up0 = ResBlock(c1 + c0, c0, tdim, rng)
        self.norm_out = nn.GroupNorm(_groups(c0), c0)
        self.conv_out = nn.Conv2d(c0, out_ch, 3, rng=rng, init_scale=0.0)

    def forward(self, feats: list[Tensor], temb: Tensor) -> Tensor:
        s0, s1, mid = feats
        h = self.up1(T.concat([T.upsample2x(mid), s1], axis=1), temb)
        h = self.up0(T.concat([T.upsample2x(h), s0], axis=1), temb)
        return self.conv_out(T.silu(self.norm_out(h)))


class Denoiser(nn.Module):
    """Predicts the injected noise from (x_t, t); input and output are [N,C,H,W]."""

    def __init__(self, image_channels: int = 3, channels: tuple[int, int] = (32, 64),
                 time_dim: int = 32, patch: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = {"image_channels": image_channels, "channels": list(channels),
                       "time_dim": time_dim, "patch": patch, "seed": seed}
        self.patch = patch
        folded = image_channels * patch * patch
        self.time = TimeEmbedding(time_dim, rng)
        self.encoder = Encoder(folded, channels, time_dim, rng)
        self.decoder = Decoder(folded, channels, time_dim, rng)

    def fold(self, x) -> Tensor:
        x = T.as_tensor(x)
        step = 4 * self.patch
        if x.shape[-1] % step or x.shape[-2] % step:
            raise ValueError(f"spatial size must be divisible by {step}")
        return T.space_to_depth(x, self.patch) if self.patch > 1 else x

    def unfold(self, x: Tensor) -> Tensor:
        return T.depth_to_space(x, self.patch) if self.patch > 1 else x

    def forward(self, x: Tensor, t) -> Tensor:
        temb = self.time(t)
        return self.unfold(self.decoder(self.encoder(self.fold(x), temb), temb))
