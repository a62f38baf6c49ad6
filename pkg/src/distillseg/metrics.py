"""Segmentation evaluation metrics: confusion counts, MPA, mIoU, Dice,
Hausdorff distance, SSIM, FID, and a paired t-test.

All functions are pure. Boundary extraction uses 4-connectivity with the
image border treated as background. Hausdorff distances are computed on
integer squared distances with a single final sqrt, so results agree exactly
with a naive brute-force evaluation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from .errors import (
    EmptyMaskError,
    DegenerateTestError,
    InsufficientDataError,
    NumericalError,
    ShapeError,
    UndefinedMetricError,
)
from .imaging import BinaryMask, LabeledSample, ProbMap, RasterImage

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class pixel counts; index i treats class i as positive."""

    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    tn: tuple[int, ...]
    num_classes: int

    def total(self) -> int:
        return self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]


@dataclass(frozen=True)
class BoundarySet:
    """Foreground pixels with at least one 4-neighbor outside the mask."""

    points: tuple[tuple[int, int], ...]


@dataclass
class ImageMetrics:
    id: str
    mpa: float
    miou: float
    dice: float
    hd: float | None
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    per_image: list[ImageMetrics]
    aggregate: dict[str, float]
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "per_image": [
                {
                    "id": m.id,
                    "mpa": m.mpa,
                    "miou": m.miou,
                    "dice": m.dice,
                    "hd": m.hd,
                    "flags": m.flags,
                }
                for m in self.per_image
            ],
            "aggregate": self.aggregate,
            "flags": self.flags,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        import io

        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "mpa", "miou", "dice", "hd"])
        for m in self.per_image:
            writer.writerow([m.id, m.mpa, m.miou, m.dice, "" if m.hd is None else m.hd])
        return buf.getvalue()

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())


def confusion(pred: BinaryMask, gt: BinaryMask, num_classes: int = 2) -> ConfusionCounts:
    """Count tp/fp/fn/tn per class, treating each class in turn as positive."""
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"pred {pred.data.shape} vs gt {gt.data.shape}")
    if num_classes != 2:
        raise ValueError("binary masks imply num_classes == 2")
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    total = p.size
    tp1 = int((p & g).sum())
    fp1 = int((p & ~g).sum())
    fn1 = int((~p & g).sum())
    tn1 = total - tp1 - fp1 - fn1
    # class 0 counts are the complements
    return ConfusionCounts(
        tp=(tn1, tp1), fp=(fn1, fp1), fn=(fp1, fn1), tn=(tp1, tn1), num_classes=2
    )


def _class_present(c: ConfusionCounts, i: int) -> bool:
    return c.tp[i] + c.fn[i] > 0


def mpa(c: ConfusionCounts, skip_empty: bool = True) -> float:
    """Mean per-class pixel accuracy: (1/C) * sum_i tp_i / (tp_i + fn_i).

    Classes absent from the ground truth are skipped when skip_empty is set;
    if every class is absent the metric is undefined.
    """
    recalls = []
    for i in range(c.num_classes):
        if not _class_present(c, i):
            if skip_empty:
                continue
            raise UndefinedMetricError(f"class {i} absent from ground truth")
        recalls.append(c.tp[i] / (c.tp[i] + c.fn[i]))
    if not recalls:
        raise UndefinedMetricError("all classes absent from ground truth")
    return float(sum(recalls) / len(recalls))


def miou(c: ConfusionCounts, skip_empty: bool = True, foreground_only: bool = False) -> float:
    """Mean IoU: (1/C) * sum_i tp_i / (tp_i + fp_i + fn_i)."""
    classes = [c.num_classes - 1] if foreground_only else range(c.num_classes)
    ious = []
    for i in classes:
        if not _class_present(c, i):
            if skip_empty:
                continue
            raise UndefinedMetricError(f"class {i} absent from ground truth")
        ious.append(c.tp[i] / (c.tp[i] + c.fp[i] + c.fn[i]))
    if not ious:
        raise UndefinedMetricError("all classes absent from ground truth")
    return float(sum(ious) / len(ious))


def dice(c: ConfusionCounts) -> float:
    """Foreground Dice coefficient 2*tp / (2*tp + fp + fn)."""
    i = c.num_classes - 1
    denom = 2 * c.tp[i] + c.fp[i] + c.fn[i]
    if denom == 0:
        raise UndefinedMetricError("foreground empty in both masks")
    return float(2 * c.tp[i] / denom)


def boundary(mask: BinaryMask) -> BoundarySet:
    """Foreground pixels with a 4-neighbor that is background or out of bounds."""
    m = mask.data.astype(bool)
    if not m.any():
        raise EmptyMaskError("cannot extract the boundary of an empty mask")
    interior = ndimage.binary_erosion(
        m, structure=ndimage.generate_binary_structure(2, 1), border_value=0
    )
    edge = m & ~interior
    rows, cols = np.nonzero(edge)
    return BoundarySet(points=tuple(zip(rows.tolist(), cols.tolist())))


def _directed_sq(a: np.ndarray, b: np.ndarray) -> int:
    """max over a of min over b of squared Euclidean distance (exact ints)."""
    # (n, 1, 2) - (1, m, 2) pairwise integer differences
    diff = a[:, None, :] - b[None, :, :]
    d2 = (diff.astype(np.int64) ** 2).sum(axis=2)
    return int(d2.min(axis=1).max())


def hausdorff(a: BoundarySet, b: BoundarySet) -> float:
    """Symmetric Hausdorff distance max(h(A,B), h(B,A)) in pixels."""
    if not a.points or not b.points:
        raise EmptyMaskError("boundary sets must be nonempty")
    pa = np.asarray(a.points, dtype=np.int64)
    pb = np.asarray(b.points, dtype=np.int64)
    worst = max(_directed_sq(pa, pb), _directed_sq(pb, pa))
    return math.sqrt(worst)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(x: RasterImage, y: RasterImage) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    Color inputs are reduced to the channel-average luminance. Dynamic range
    is 1.0 with the usual stabilizers C1=(K1)^2, C2=(K2)^2.
    """
    if (x.height, x.width) != (y.height, y.width):
        raise ShapeError(f"image grids differ: {x.data.shape} vs {y.data.shape}")
    gx = x.gray().astype(np.float64)
    gy = y.gray().astype(np.float64)
    win = min(SSIM_WINDOW, gx.shape[0], gx.shape[1])
    if win % 2 == 0:
        win -= 1
    if win < 3:
        raise ShapeError("images too small for SSIM windowing")
    kernel = _gaussian_window(win, SSIM_SIGMA)

    def filt(img):
        full = ndimage.correlate(img, kernel, mode="constant")
        half = win // 2
        return full[half:img.shape[0] - half, half:img.shape[1] - half]

    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_x = filt(gx)
    mu_y = filt(gy)
    xx = filt(gx * gx) - mu_x * mu_x
    yy = filt(gy * gy) - mu_y * mu_y
    xy = filt(gx * gy) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def _psd_sqrt(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping tiny negatives."""
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -tol:
        raise NumericalError(f"matrix not PSD: min eigenvalue {vals.min():g}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """Frechet distance between Gaussians:
    ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The cross term uses Tr((A^(1/2) B A^(1/2))^(1/2)) so the computation is
    symmetric and stays in real arithmetic.
    """
    mu_a = np.asarray(mu_a, dtype=np.float64).ravel()
    mu_b = np.asarray(mu_b, dtype=np.float64).ravel()
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    d = mu_a.shape[0]
    if mu_b.shape[0] != d or cov_a.shape != (d, d) or cov_b.shape != (d, d):
        raise ShapeError(
            f"dimension mismatch: mu {mu_a.shape}/{mu_b.shape}, "
            f"cov {cov_a.shape}/{cov_b.shape}"
        )
    for cov in (cov_a, cov_b):
        if np.abs(cov - cov.T).max() > 1e-6:
            raise NumericalError("covariance not symmetric within 1e-6")
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -1e-6:
        raise NumericalError(f"cross term not PSD: min eigenvalue {vals.min():g}")
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    delta = mu_a - mu_b
    value = float(delta @ delta + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(value, 0.0)


def paired_t_test(xs, ys) -> tuple[float, float]:
    """Two-sided paired t-test on xs - ys.

    Returns (t, p) with t = mean(d) / (sd(d) / sqrt(n)) using the n-1 sample
    standard deviation, and p from the Student-t CDF with n-1 degrees of
    freedom evaluated through the regularized incomplete beta function.
    Identical samples return (0.0, 1.0); nonzero constant differences are a
    degenerate test.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError("paired samples must be equal-length 1-D sequences")
    n = xs.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 pairs, got {n}")
    d = xs - ys
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        raise DegenerateTestError("all differences identical and nonzero")
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), p


def _predict_prob(model, image: RasterImage, prompt=None) -> ProbMap:
    if hasattr(model, "predict_prob"):
        if prompt is not None:
            return model.predict_prob(image, prompt)
        return model.predict_prob(image)
    out = model(image)
    return out if isinstance(out, ProbMap) else ProbMap(np.asarray(out))


def evaluate(model, samples: list[LabeledSample], threshold: float = 0.5,
             prompt_fn=None) -> MetricReport:
    """Run a model over labeled samples and aggregate per-image metrics.

    `model` is anything exposing predict_prob(RasterImage) -> ProbMap, or a
    plain callable with the same shape. Prompt-aware models can be fed a
    per-sample prompt through prompt_fn(sample). HD is computed on the
    boundaries of the thresholded prediction; images whose prediction has no
    foreground get hd=None, a flag, and are excluded from the HD aggregate.
    """
    if not samples:
        raise InsufficientDataError("no samples to evaluate")
    rows = []
    for s in samples:
        prompt = prompt_fn(s) if prompt_fn is not None else None
        prob = _predict_prob(model, s.image, prompt)
        pred = prob.threshold(threshold)
        c = confusion(pred, s.mask)
        flags = []
        try:
            hd_val = hausdorff(boundary(pred), boundary(s.mask))
        except EmptyMaskError:
            hd_val = None
            flags.append("hd_undefined_empty_prediction")
        rows.append(
            ImageMetrics(
                id=s.id, mpa=mpa(c), miou=miou(c), dice=dice(c), hd=hd_val, flags=flags
            )
        )
    hd_values = [r.hd for r in rows if r.hd is not None]
    aggregate = {
        "mpa": float(np.mean([r.mpa for r in rows])),
        "miou": float(np.mean([r.miou for r in rows])),
        "dice": float(np.mean([r.dice for r in rows])),
        "hd": float(np.mean(hd_values)) if hd_values else None,
        "n_images": len(rows),
        "n_hd_excluded": len(rows) - len(hd_values),
    }
    report_flags = []
    if len(hd_values) < len(rows):
        report_flags.append("hd_excluded_images")
    return MetricReport(per_image=rows, aggregate=aggregate, flags=report_flags)
