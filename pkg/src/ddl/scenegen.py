"""Procedural ground-truth scenes and their oracle "challenging" renderings.

A scene is a ground plane seen from a camera one unit above it, with a sky
above the horizon and a handful of frontal-parallel primitives standing on
the ground. Inverse depth of the ground is linear in the image row, so every
scene has a non-degenerate depth ramp.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

LAMBERTIAN = 0
TOM = 1

SKY_COLOR = (0.60, 0.75, 0.95)
GROUND_ALBEDO = (0.55, 0.50, 0.45)


class ConditionTag(str, enum.Enum):
    NIGHT = "night"
    RAIN = "rain"
    TOM = "tom"

    @classmethod
    def parse(cls, value) -> "ConditionTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown condition tag {value!r}; expected one of "
                             f"{[c.value for c in cls]}") from None

    @property
    def index(self) -> int:
        return list(ConditionTag).index(self)


DEFAULT_CONDITIONS = (ConditionTag.NIGHT, ConditionTag.RAIN, ConditionTag.TOM)


@dataclass(frozen=True)
class OracleParams:
    """Strengths of the parametric adverse-condition transforms.

    ``strength`` scales every perturbation towards the identity: at 0 each
    oracle returns the easy image unchanged.
    """

    night_gamma: float = 2.2
    night_blue_bias: float = 0.06
    night_noise_sigma: float = 0.02
    rain_streak_density: float = 0.05
    rain_streak_length: int = 6
    rain_streak_slant: float = 0.35
    rain_streak_intensity: float = 0.55
    rain_blur: float = 0.7
    rain_contrast_loss: float = 0.45
    tom_reflectance: float = 0.9
    tom_attenuation: float = 0.85
    strength: float = 1.0

    def __post_init__(self):
        if self.night_gamma < 1.0:
            raise ValueError("night_gamma must be >= 1 (darkening)")
        for name in ("night_blue_bias", "night_noise_sigma", "rain_streak_density",
                     "rain_streak_intensity", "rain_blur", "rain_contrast_loss",
                     "tom_reflectance", "tom_attenuation", "strength"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def scaled(self, strength: float) -> "OracleParams":
        return replace(self, strength=strength)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    n_objects: tuple[int, int] = (2, 5)
    d_min: float = 1.0
    d_max: float = 10.0
    horizon: tuple[float, float] = (0.30, 0.45)
    object_depth: tuple[float, float] = (1.5, 6.0)
    object_size: tuple[float, float] = (0.8, 2.2)
    tom_fraction: float = 0.6
    ellipse_fraction: float = 0.5

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")
        if self.d_max <= self.d_min:
            raise ValueError("d_max must exceed d_min")
        if self.height < 4 or self.width < 4:
            raise ValueError("resolution must be at least 4x4")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ValueError("invalid object count range")
        zlo, zhi = self.object_depth
        if not self.d_min <= zlo <= zhi <= self.d_max:
            raise ValueError("object depth range must lie inside [d_min, d_max]")


@dataclass(frozen=True)
class Primitive:
    kind: str
    top: int
    left: int
    bottom: int
    right: int
    depth: float
    albedo: tuple[float, float, float]
    tom: bool

    def coverage(self, height: int, width: int) -> np.ndarray:
        rows = np.arange(height)[:, None]
        cols = np.arange(width)[None, :]
        inside = (rows >= self.top) & (rows <= self.bottom) & (cols >= self.left) & (cols <= self.right)
        if self.kind == "ellipse":
            cy = 0.5 * (self.top + self.bottom + 1)
            cx = 0.5 * (self.left + self.right + 1)
            ry = 0.5 * (self.bottom - self.top + 1)
            rx = 0.5 * (self.right - self.left + 1)
            inside &= ((rows + 0.5 - cy) / ry) ** 2 + ((cols + 0.5 - cx) / rx) ** 2 <= 1.0
        return inside


@dataclass
class DepthMap:
    values: np.ndarray
    valid_mask: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def inverse(self) -> np.ndarray:
        """Inverse depth with invalid (sky / out-of-range) pixels at 0."""
        return np.where(self.valid_mask, 1.0 / self.values, 0.0)


@dataclass
class Scene:
    id: str
    seed: int
    spec: SceneSpec
    depth: DepthMap
    easy_image: np.ndarray
    object_mask: np.ndarray
    material_mask: np.ndarray
    primitives: tuple[Primitive, ...] = field(default_factory=tuple)
    horizon_row: float = 0.0


def ground_depth(spec: SceneSpec, horizon_row: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ground depth (sky/too-far rows clamped to d_max) and validity."""
    rows = np.arange(spec.height) + 0.5
    inv = (rows - horizon_row) / (spec.height - 0.5 - horizon_row) / spec.d_min
    valid = inv > 1.0 / spec.d_max
    depth = np.where(valid, 1.0 / np.where(valid, inv, 1.0), spec.d_max)
    return depth, valid


def _focal(spec: SceneSpec, horizon_row: float) -> float:
    # camera one unit above ground: the bottom row centre sees ground at d_min
    return (spec.height - 0.5 - horizon_row) * spec.d_min


def _sample_primitives(rng: np.random.Generator, spec: SceneSpec, horizon_row: float) -> list[Primitive]:
    count = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    focal = _focal(spec, horizon_row)
    n_tom = math.ceil(spec.tom_fraction * count) if count else 0
    tom_ids = set(rng.choice(count, size=n_tom, replace=False).tolist()) if n_tom else set()
    prims = []
    for k in range(count):
        z = float(rng.uniform(*spec.object_depth))
        size_h, size_w = rng.uniform(*spec.object_size, size=2)
        h_px = max(2, int(round(size_h * focal / z)))
        w_px = max(2, int(round(size_w * focal / z)))
        # base sits where the ground is exactly as far as the object
        base = horizon_row + focal / z
        bottom = min(int(math.floor(base - 0.5)), spec.height - 1)
        left = int(rng.integers(-w_px // 2, spec.width - w_px // 2))
        kind = "ellipse" if rng.random() < spec.ellipse_fraction else "rect"
        albedo = tuple(float(a) for a in rng.uniform(0.25, 0.95, size=3))
        prims.append(Primitive(kind, bottom - h_px + 1, left, bottom, left + w_px - 1, z, albedo, k in tom_ids))
    return prims


def _shade(depth: np.ndarray, d_min: float) -> np.ndarray:
    return 0.3 + 0.7 * (d_min / depth)


def render(spec: SceneSpec, horizon_row: float, prims, skip=lambda p: False):
    """Z-buffer render: returns (depth, valid, object ids, material, image)."""
    h, w = spec.height, spec.width
    gdepth, gvalid = ground_depth(spec, horizon_row)
    depth = np.repeat(gdepth[:, None], w, axis=1)
    valid = np.repeat(gvalid[:, None], w, axis=1)
    ids = np.zeros((h, w), dtype=np.int64)
    albedo = np.empty((3, h, w))
    for c in range(3):
        albedo[c] = np.where(valid, GROUND_ALBEDO[c], 0.0)
    for k, prim in enumerate(prims):
        if skip(prim):
            continue
        hit = prim.coverage(h, w) & (prim.depth < depth)
        depth[hit] = prim.depth
        valid[hit] = True
        ids[hit] = k + 1
        for c in range(3):
            albedo[c][hit] = prim.albedo[c]
    material = np.zeros((h, w), dtype=np.uint8)
    for k, prim in enumerate(prims):
        if prim.tom:
            material[ids == k + 1] = TOM
    shade = _shade(depth, spec.d_min)
    image = np.empty((3, h, w))
    for c in range(3):
        image[c] = np.where(valid, albedo[c] * shade, SKY_COLOR[c])
    return depth, valid, ids, material, np.clip(image, 0.0, 1.0)


def generate_scene(seed: int, spec: SceneSpec | None = None, scene_id: str | None = None) -> Scene:
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    horizon_row = float(rng.uniform(*spec.horizon)) * spec.height
    prims = _sample_primitives(rng, spec, horizon_row)
    depth, valid, ids, material, image = render(spec, horizon_row, prims)
    return Scene(
        id=scene_id or f"scene_{seed}",
        seed=seed,
        spec=spec,
        depth=DepthMap(np.clip(depth, spec.d_min, spec.d_max), valid),
        easy_image=image,
        object_mask=ids,
        material_mask=material,
        primitives=tuple(prims),
        horizon_row=horizon_row,
    )


# ---------------------------------------------------------------- conditions
def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = img.shape[1:]
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy:dy + h, dx:dx + w]
    return acc / 9.0


def _night(img, rng, p: OracleParams):
    s = p.strength
    gamma = 1.0 + s * (p.night_gamma - 1.0)
    out = img ** gamma
    out[2] = out[2] + s * p.night_blue_bias
    out = out + (s * p.night_noise_sigma) * rng.standard_normal(img.shape)
    return out


def _rain_streaks(rng, shape, p: OracleParams) -> np.ndarray:
    h, w = shape
    seeds = np.argwhere(rng.random((h, w)) < p.rain_streak_density)
    slant = p.rain_streak_slant * (1.0 + 0.3 * rng.uniform(-1, 1))
    mask = np.zeros((h, w))
    for r0, c0 in seeds:
        for step in range(p.rain_streak_length):
            r = r0 + step
            c = int(round(c0 + slant * step))
            if r >= h or not 0 <= c < w:
                break
            mask[r, c] = 1.0
    return mask


def _rain(img, rng, p: OracleParams):
    s = p.strength
    contrast = s * p.rain_contrast_loss
    out = img * (1.0 - contrast) + img.mean() * contrast
    blur = s * p.rain_blur
    out = out * (1.0 - blur) + _box_blur(out) * blur
    streaks = _rain_streaks(rng, img.shape[1:], p) * (s * p.rain_streak_intensity)
    return out + streaks * (1.0 - out)


def _tom(scene: Scene, p: OracleParams):
    img = scene.easy_image
    r = p.strength * p.tom_reflectance
    *_, background = render(scene.spec, scene.horizon_row, scene.primitives, skip=lambda q: q.tom)
    out = img
    for k, prim in enumerate(scene.primitives):
        if not prim.tom:
            continue
        mask = scene.object_mask == k + 1
        if not mask.any():
            continue
        # the surface shows what lies behind it, mirrored left-right
        top, bottom = max(prim.top, 0), min(prim.bottom, scene.spec.height - 1)
        left, right = max(prim.left, 0), min(prim.right, scene.spec.width - 1)
        mirrored = background.copy()
        mirrored[:, top:bottom + 1, left:right + 1] = background[:, top:bottom + 1, left:right + 1][:, :, ::-1]
        blended = img * (1.0 - r) + (p.tom_attenuation * mirrored) * r
        out = np.where(mask[None], blended, out)
    return out


def apply_condition_oracle(scene: Scene, tag, seed: int, params: OracleParams | None = None) -> np.ndarray:
    """Adverse rendering of ``scene`` under ``tag``; depth is never touched.

    Deterministic in ``(scene.seed, tag, seed)``.
    """
    tag = ConditionTag.parse(tag)
    params = params or OracleParams()
    rng = np.random.default_rng([scene.seed & 0xFFFFFFFFFFFFFFFF, tag.index, seed])
    if tag is ConditionTag.NIGHT:
        out = _night(scene.easy_image, rng, params)
    elif tag is ConditionTag.RAIN:
        out = _rain(scene.easy_image, rng, params)
    else:
        out = _tom(scene, params)
    return np.clip(out, 0.0, 1.0)


def normalized_inverse_depth(depth: DepthMap) -> np.ndarray:
    """Per-image min-max normalized inverse depth in [0, 1] (sky -> 0)."""
    inv = depth.inverse()
    lo, hi = inv.min(), inv.max()
    if hi - lo <= 0:
        return np.zeros_like(inv)
    return (inv - lo) / (hi - lo)
