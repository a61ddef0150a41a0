"""Pseudo-label self-distillation with a scale-and-shift-invariant L1 loss."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .depthnet import DepthNetwork, predict_inverse_depth
from .errors import DegenerateInputError, EmptySplitError, MissingDependencyError, NumericalError
from .numerics import checkpoint
from .numerics import tensor as T
from .numerics.optim import AdamW
from .numerics.tensor import Tensor
from .scenegen import ConditionTag, Scene, apply_condition_oracle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffineParams:
    s: float
    b: float
    degenerate: bool = False


def affine_align(pred, target, mask=None) -> AffineParams:
    """Least-squares (s, b) minimising sum_mask (s*pred + b - target)^2.

    Solves the 2x2 normal equations in centred form: s = cov/var,
    b = mean(target) - s*mean(pred). Constant predictions fall back to s=1
    and a pure shift, flagged as degenerate.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} and target {t.shape} differ in shape")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        p, t = p[m], t[m]
    else:
        p, t = p.ravel(), t.ravel()
    if p.size < 2:
        raise DegenerateInputError("alignment needs at least 2 valid pixels")
    pm, tm = p.mean(), t.mean()
    dp = p - pm
    var = np.dot(dp, dp) / p.size
    scale = max(np.dot(p, p) / p.size, 1e-300)
    if not np.isfinite(var) or var <= 1e-12 * scale:
        return AffineParams(1.0, float(tm - pm), True)
    s = np.dot(dp, t - tm) / p.size / var
    return AffineParams(float(s), float(tm - s * pm), False)


def _as_2d_mask(mask, shape) -> np.ndarray:
    return np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


def ssi_loss(pred, label, mask=None) -> tuple[Tensor, AffineParams]:
    """(1/2M) * sum_mask |s*pred + b - label| with (s, b) held constant.

    Returns the differentiable loss and the alignment used.
    """
    pred = T.as_tensor(pred)
    label = np.asarray(label, dtype=np.float64)
    m = _as_2d_mask(mask, label.shape)
    count = int(m.sum())
    if count < 2:
        raise DegenerateInputError("SSI loss needs at least 2 valid pixels")
    params = affine_align(pred.data, label, m)
    if params.degenerate:
        log.warning("degenerate alignment in ssi_loss; using shift-only fallback")
    resid = pred * params.s + (params.b - label)
    loss = (T.tabs(resid) * Tensor(m.astype(pred.dtype))).sum() * (1.0 / (2 * count))
    return loss, params


def ssi_loss_batch(pred: Tensor, labels, masks) -> tuple[Tensor, np.ndarray]:
    """Mean per-image SSI loss over a batch; pred is [N,1,H,W] or [N,H,W].

    Alignment is per image. Returns the loss and the per-image loss values.
    """
    pred = T.as_tensor(pred)
    if pred.ndim == 4:
        pred = pred.reshape(pred.shape[0], *pred.shape[2:])
    labels = np.asarray(labels, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n = pred.shape[0]
    counts = masks.reshape(n, -1).sum(axis=1)
    if np.any(counts < 2):
        raise DegenerateInputError("every image needs at least 2 valid pixels")
    params = [affine_align(pred.data[i], labels[i], masks[i]) for i in range(n)]
    if any(p.degenerate for p in params):
        log.warning("degenerate alignment in batch; using shift-only fallback")
    s = np.array([p.s for p in params]).reshape(n, 1, 1)
    b = np.array([p.b for p in params]).reshape(n, 1, 1)
    weight = masks / (2.0 * counts.reshape(n, 1, 1) * n)
    dtype = pred.dtype
    resid = pred * Tensor(s.astype(dtype)) + Tensor((b - labels).astype(dtype))
    weighted = T.tabs(resid) * Tensor(weight.astype(dtype))
    per_image = weighted.data.reshape(n, -1).sum(axis=1, dtype=np.float64) * n
    return weighted.sum(), per_image


@dataclass(frozen=True)
class TrainingPair:
    """(easy, hard, pseudo_label) triple; ``condition=None`` marks an easy-only record."""

    easy: np.ndarray
    hard: np.ndarray
    condition: ConditionTag | None
    pseudo_label: np.ndarray
    valid_mask: np.ndarray
    scene_id: str
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.easy.shape != self.hard.shape:
            raise ValueError("easy and hard images must share a shape")
        if self.pseudo_label.shape != self.easy.shape[1:]:
            raise ValueError("pseudo_label must match the image resolution")

    @property
    def image(self) -> np.ndarray:
        """The image the student sees for this record."""
        return self.easy if self.condition is None else self.hard


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def hard_seed(base_seed: int, scene_seed: int, tag) -> int:
    """Seed of the generator stream for one (scene, condition) hard image."""
    tag = ConditionTag.parse(tag)
    return int(np.random.SeedSequence([int(base_seed), int(scene_seed), tag.index]).generate_state(1)[0])


def oracle_hard_images(scenes: Sequence[Scene], conditions, base_seed: int, params=None) -> dict:
    """Ablation source: {(scene_id, tag): (image, provenance)} from the condition oracle."""
    out = {}
    for scene in scenes:
        for tag in conditions:
            tag = ConditionTag.parse(tag)
            seed = hard_seed(base_seed, scene.seed, tag)
            out[(scene.id, tag)] = (apply_condition_oracle(scene, tag, seed, params),
                                    {"source": "oracle", "seed": seed})
    return out


def diffusion_hard_images(scenes: Sequence[Scene], conditions, base_seed: int, model, schedule,
                          checkpoint_id: str = "", batch_size: int = 32,
                          progress: Callable[[int, int], None] | None = None) -> dict:
    """Diffusion source: one conditioned ancestral sample per (scene, tag)."""
    from .diffusion import generate_hard

    keys, depths, tags, seeds = [], [], [], []
    for scene in scenes:
        for tag in conditions:
            tag = ConditionTag.parse(tag)
            keys.append((scene.id, tag))
            depths.append(scene.depth)
            tags.append(tag)
            seeds.append(hard_seed(base_seed, scene.seed, tag))
    out = {}
    for start in range(0, len(keys), batch_size):
        sl = slice(start, start + batch_size)
        images = generate_hard(model, depths[sl], tags[sl], seeds[sl], schedule, batch_size=batch_size)
        for key, img, seed in zip(keys[sl], images, seeds[sl]):
            out[key] = (img, {"source": "diffusion", "seed": seed, "checkpoint": checkpoint_id})
        if progress is not None:
            progress(min(start + batch_size, len(keys)), len(keys))
    return out


def build_pairs(scenes: Sequence[Scene], conditions, teacher: DepthNetwork, hard_images: Mapping) -> list[TrainingPair]:
    """N scenes x |C| conditions -> N*|C| hard pairs followed by N easy records.

    Pseudo-labels are the teacher's prediction on the easy image only.
    ``hard_images`` maps (scene_id, tag) -> (image, provenance).
    """
    conditions = [ConditionTag.parse(c) for c in conditions]
    scenes = list(scenes)
    for scene in scenes:
        for tag in conditions:
            if (scene.id, tag) not in hard_images:
                raise MissingDependencyError(f"no hard image for scene {scene.id!r} condition {tag.value!r}",
                                             producer="gen-hard")
    if not scenes:
        return []
    easy = np.stack([s.easy_image for s in scenes])
    labels = predict_inverse_depth(teacher, easy)
    pairs, records = [], []
    for scene, e, label in zip(scenes, easy, labels):
        e, label, valid = _frozen(e), _frozen(label), _frozen(scene.depth.valid_mask)
        for tag in conditions:
            img, prov = hard_images[(scene.id, tag)]
            pairs.append(TrainingPair(e, _frozen(np.asarray(img, dtype=np.float64)), tag, label, valid,
                                      scene.id, dict(prov)))
        records.append(TrainingPair(e, e, None, label, valid, scene.id, {"source": "easy"}))
    return pairs + records


@dataclass(frozen=True)
class AugmentConfig:
    jitter: float = 0.2
    rgb_shift: float = 0.05
    flip: bool = True


def hflip_pair(pair: TrainingPair) -> TrainingPair:
    return replace(pair, easy=_frozen(pair.easy[..., ::-1]), hard=_frozen(pair.hard[..., ::-1]),
                   pseudo_label=_frozen(pair.pseudo_label[..., ::-1]),
                   valid_mask=_frozen(pair.valid_mask[..., ::-1]))


def _photometric(img: np.ndarray, brightness, contrast, saturation, shift) -> np.ndarray:
    out = img
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        m = out.mean()
        out = (out - m) * contrast + m
    if saturation != 1.0:
        gray = out.mean(axis=0, keepdims=True)
        out = (out - gray) * saturation + gray
    if np.any(shift):
        out = out + shift.reshape(-1, 1, 1)
    return out if out is img else np.clip(out, 0.0, 1.0)


def augment(pair: TrainingPair, seed: int, config: AugmentConfig = AugmentConfig()) -> TrainingPair:
    """Colour jitter and RGB shift on images only; horizontal flip on images and label jointly."""
    rng = np.random.default_rng(seed)
    j = config.jitter
    factors = 1.0 + rng.uniform(-j, j, size=3) if j > 0 else np.ones(3)
    shift = rng.uniform(-config.rgb_shift, config.rgb_shift, size=3) if config.rgb_shift > 0 else np.zeros(3)
    do_flip = config.flip and rng.random() < 0.5
    easy = _photometric(pair.easy, *factors, shift)
    hard = easy if pair.hard is pair.easy else _photometric(pair.hard, *factors, shift)
    out = replace(pair, easy=_frozen(easy), hard=_frozen(hard)) if (easy is not pair.easy) else pair
    return hflip_pair(out) if do_flip else out


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 3000
    lr: float = 2e-3
    decay_at: int = 2500
    decayed_lr: float = 2e-4
    batch_size: int = 8
    weight_decay: float = 1e-4
    rho: str = "l1"
    augment: AugmentConfig = AugmentConfig()
    use_augment: bool = True
    val_every: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and val_every >= 1 required")
        if not self.decayed_lr < self.lr:
            raise ValueError("decayed_lr must be below lr")
        if self.iterations > 0 and not 0 <= self.decay_at < self.iterations:
            raise ValueError("decay_at must lie inside the iteration budget")
        if self.rho != "l1":
            raise ValueError(f"unsupported robust function {self.rho!r}")


def _stack(pairs: Sequence[TrainingPair]):
    return (np.stack([p.image for p in pairs]), np.stack([p.pseudo_label for p in pairs]),
            np.stack([p.valid_mask for p in pairs]))


def evaluate_ssi(net: DepthNetwork, pairs: Sequence[TrainingPair], batch_size: int = 64) -> float:
    """Mean per-image SSI loss of ``net`` against the pairs' pseudo-labels."""
    if not pairs:
        raise EmptySplitError("no pairs to evaluate")
    total = 0.0
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            images, labels, masks = _stack(chunk)
            loss, _ = ssi_loss_batch(net(Tensor(images.astype(T.get_default_dtype()))), labels, masks)
            total += loss.item() * len(chunk)
    return total / len(pairs)


@dataclass
class DistillResult:
    student: DepthNetwork
    best_iteration: int
    best_val: float | None
    log_rows: list


def finetune_student(student: DepthNetwork, pairs: Sequence[TrainingPair], config: DistillConfig = DistillConfig(),
                     val_pairs: Sequence[TrainingPair] = (), log_path: Path | None = None,
                     checkpoint_path: Path | None = None) -> DistillResult:
    """Fine-tune ``student`` on shuffled batches of hard pairs and easy records.

    LR drops to ``decayed_lr`` at ``decay_at``. With validation pairs the
    best-on-validation parameters are kept (and written to
    ``checkpoint_path``). A non-finite loss restores the last good
    parameters and raises NumericalError.
    """
    pairs = list(pairs)
    if not pairs and config.iterations > 0:
        raise EmptySplitError("no training pairs")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(student.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    dtype = T.get_default_dtype()
    best_state = student.state_dict()
    best_val = evaluate_ssi(student, val_pairs) if val_pairs else None
    best_it = 0
    rows = []
    order = np.zeros(0, dtype=int)
    pos = 0

    def save_best():
        if checkpoint_path is not None:
            checkpoint.save(checkpoint_path, best_state)

    for it in range(1, config.iterations + 1):
        if it - 1 == config.decay_at:
            opt.lr = config.decayed_lr
        if pos + config.batch_size > len(order):
            order = rng.permutation(len(pairs))
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        batch = [pairs[i] for i in idx]
        if config.use_augment:
            seeds = rng.integers(0, 2**63, size=len(batch))
            batch = [augment(p, int(s), config.augment) for p, s in zip(batch, seeds)]
        images, labels, masks = _stack(batch)
        pred = student(Tensor(images.astype(dtype)))
        loss, per_image = ssi_loss_batch(pred, labels, masks)
        value = loss.item()
        if not np.isfinite(value) or not _step(loss, opt):
            student.load_state_dict(best_state)
            save_best()
            raise NumericalError(f"non-finite loss or gradient at iteration {it}; restored last good parameters")
        hard = np.array([p.condition is not None for p in batch])
        row = {"iteration": it, "lr": opt.lr, "loss": value,
               "loss_easy": float(per_image[~hard].mean()) if (~hard).any() else "",
               "loss_hard": float(per_image[hard].mean()) if hard.any() else "", "val_loss": ""}
        if val_pairs and (it % config.val_every == 0 or it == config.iterations):
            v = evaluate_ssi(student, val_pairs)
            row["val_loss"] = v
            if v < best_val:
                best_val, best_it, best_state = v, it, student.state_dict()
        elif not val_pairs:
            best_state, best_it = student.state_dict(), it
        rows.append(row)
    if val_pairs:
        student.load_state_dict(best_state)
    save_best()
    if log_path is not None:
        write_log(log_path, rows)
    return DistillResult(student, best_it, best_val, rows)


def _step(loss: Tensor, opt: AdamW) -> bool:
    opt.zero_grad()
    loss.backward()
    return opt.step()


def write_log(path, rows: Sequence[Mapping]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
