"""Alignment, depth metrics and per-split / per-category reporting."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .distill import affine_align
from .errors import DegenerateInputError, EmptySplitError
from .scenegen import TOM

DEFAULT_TAUS = (1.05, 1.15, 1.25)
ALIGN_MODES = ("lse", "median", "none")
CATEGORIES = ("All", "ToM", "Other")


@dataclass(frozen=True)
class Alignment:
    depth: np.ndarray
    scale: float
    shift: float
    clamped: int = 0
    degenerate: bool = False


def lse_rescale(pred_inv, gt_depth, mask, d_min: float, d_max: float) -> Alignment:
    """Fit s*pred + b to 1/gt on ``mask``, invert to depth, clamp to [d_min, d_max]."""
    pred_inv = np.asarray(pred_inv, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    target = np.zeros_like(gt_depth)
    np.divide(1.0, gt_depth, out=target, where=mask)
    params = affine_align(pred_inv, target, mask)
    inv = params.s * pred_inv + params.b
    lo, hi = 1.0 / d_max, 1.0 / d_min
    clamped = int(np.count_nonzero(((inv < lo) | (inv > hi)) & mask))
    depth = 1.0 / np.clip(inv, lo, hi)
    return Alignment(depth, params.s, params.b, clamped, params.degenerate)


def median_rescale(pred_inv, gt_depth, mask) -> Alignment:
    """Scale 1/pred so its median on ``mask`` matches the ground truth median."""
    pred_inv = np.asarray(pred_inv, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptySplitError("median scaling needs at least one valid pixel")
    med_inv = np.median(pred_inv[mask])
    if not med_inv > 0:
        raise DegenerateInputError("median predicted inverse depth is not positive")
    with np.errstate(divide="ignore"):
        pred_depth = np.where(pred_inv > 0, 1.0 / np.where(pred_inv > 0, pred_inv, 1.0), np.inf)
    factor = np.median(gt_depth[mask]) / np.median(pred_depth[mask])
    return Alignment(pred_depth * factor, float(factor), 0.0)


def no_rescale(pred_inv) -> Alignment:
    pred_inv = np.asarray(pred_inv, dtype=np.float64)
    with np.errstate(divide="ignore"):
        depth = np.where(pred_inv > 0, 1.0 / np.where(pred_inv > 0, pred_inv, 1.0), np.inf)
    return Alignment(depth, 1.0, 0.0)


@dataclass
class MetricsReport:
    split: str
    category: str
    n: int
    absrel: float
    sqrel: float
    rmse: float
    mae: float
    delta: dict
    alignment: str = "lse"
    model: str = ""
    clamped: int = 0
    degenerate: int = 0

    def row(self, taus: Sequence[float]) -> list:
        return [self.model, self.split, self.category, self.alignment, self.n,
                *(_fmt(v) for v in (self.absrel, self.sqrel, self.rmse, self.mae)),
                *(_fmt(self.delta[t]) for t in taus), self.clamped, self.degenerate]


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


@dataclass
class _Sums:
    """Fixed-order pooled accumulators (one update per image)."""
    taus: tuple
    n: int = 0
    abs_rel: float = 0.0
    sq_rel: float = 0.0
    sq: float = 0.0
    abs_err: float = 0.0
    hits: dict = field(default_factory=dict)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.size == 0:
            return
        err = gt - pred
        self.n += pred.size
        self.abs_rel += math.fsum(np.abs(err) / gt)
        self.sq_rel += math.fsum(err * err / gt)
        self.sq += math.fsum(err * err)
        self.abs_err += math.fsum(np.abs(err))
        ratio = _ratio(pred, gt)
        for tau in self.taus:
            self.hits[tau] = self.hits.get(tau, 0) + int(np.count_nonzero(ratio < tau))

    def report(self, split: str, category: str, **kw) -> MetricsReport:
        if self.n == 0:
            raise EmptySplitError(f"no valid pixels for split {split!r} category {category!r}")
        n = self.n
        return MetricsReport(split, category, n, self.abs_rel / n, self.sq_rel / n, math.sqrt(self.sq / n),
                             self.abs_err / n, {t: 100.0 * self.hits.get(t, 0) / n for t in self.taus}, **kw)


def _ratio(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    ratio = np.full(pred.shape, np.inf)
    ok = pred > 0
    ratio[ok] = np.maximum(pred[ok] / gt[ok], gt[ok] / pred[ok])
    return ratio


def compute_metrics(pred_depth, gt_depth, mask=None, taus: Sequence[float] = DEFAULT_TAUS,
                    split: str = "", category: str = "All", **kw) -> MetricsReport:
    """AbsRel, sqRel, RMSE, MAE and delta_tau over ``mask`` for an aligned prediction.

    Non-positive predictions fail every delta threshold.
    """
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    m = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sums = _Sums(tuple(taus))
    sums.add(pred[m], gt[m])
    return sums.report(split, category, **kw)


def align(mode: str, pred_inv, gt_depth, mask, d_min: float, d_max: float) -> Alignment:
    if mode == "lse":
        return lse_rescale(pred_inv, gt_depth, mask, d_min, d_max)
    if mode == "median":
        return median_rescale(pred_inv, gt_depth, mask)
    if mode == "none":
        return no_rescale(pred_inv)
    raise ValueError(f"alignment must be one of {ALIGN_MODES}, got {mode!r}")


def masked_eval(preds, gts, valid_masks, material_masks, split: str, d_min: float, d_max: float,
                align_mode: str = "lse", taus: Sequence[float] = DEFAULT_TAUS, model: str = "") -> list[MetricsReport]:
    """Pooled All/ToM/Other reports for one split.

    Each image is aligned once on its All pixels; pixels are then pooled over
    images per category. An empty category is omitted.
    """
    taus = tuple(taus)
    sums = {c: _Sums(taus) for c in CATEGORIES}
    clamped = degenerate = 0
    for pred, gt, valid, material in zip(preds, gts, valid_masks, material_masks):
        gt = np.asarray(gt, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        tom = (np.asarray(material) == TOM) & valid
        if not valid.any():
            continue
        a = align(align_mode, pred, gt, valid, d_min, d_max)
        clamped += a.clamped
        degenerate += int(a.degenerate)
        for cat, m in (("All", valid), ("ToM", tom), ("Other", valid & ~tom)):
            sums[cat].add(a.depth[m], gt[m])
    if sums["All"].n == 0:
        raise EmptySplitError(f"split {split!r} has no valid pixels")
    return [sums[c].report(split, c, alignment=align_mode, model=model, clamped=clamped, degenerate=degenerate)
            for c in CATEGORIES if sums[c].n > 0]


def csv_header(taus: Sequence[float]) -> list[str]:
    return ["model", "split", "category", "alignment", "n", "absrel", "sqrel", "rmse", "mae",
            *(f"delta_{t:g}" for t in taus), "clamped", "degenerate"]


def report_csv(reports: Sequence[MetricsReport], taus: Sequence[float] = DEFAULT_TAUS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(taus))
    for r in reports:
        w.writerow(r.row(taus))
    return buf.getvalue()


def _json_ready(report: MetricsReport) -> dict:
    d = asdict(report)
    d["delta"] = {f"{t:g}": v for t, v in report.delta.items()}
    return d


def report_json(reports: Sequence[MetricsReport], provenance: Mapping) -> str:
    doc = {"provenance": provenance, "reports": [_json_ready(r) for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit_report(reports: Sequence[MetricsReport], out_dir, provenance: Mapping | None = None,
                taus: Sequence[float] = DEFAULT_TAUS) -> tuple[Path, Path]:
    """Write ``report.csv`` and ``report.json`` into ``out_dir``."""
    if not reports:
        raise EmptySplitError("no reports to emit")
    out_dir = Path(out_dir)
    paths = out_dir / "report.csv", out_dir / "report.json"
    texts = report_csv(reports, taus), report_json(reports, dict(provenance or {}))
    for path, text in zip(paths, texts):
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"could not write report to {path}: {exc}") from exc
    return paths


def mask_hash(masks: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for m in masks:
        a = np.ascontiguousarray(np.asarray(m, dtype=np.uint8))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
