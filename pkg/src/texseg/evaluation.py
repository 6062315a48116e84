"""
Whole-image inference and pixel-level metrics.

Residual maps come from strided 128 x 128 patch reconstruction with overlap
averaging. Metrics pool every pixel of the dataset: thresholded maps are
cleaned by a morphological opening before counting, then swept into a ROC.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .imaging import DatasetManifest, downscale_bilinear, load_image, load_mask
from .models import reconstruct, vae_residual
from .ssim import SsimParams, l2_residual, ssim_residual

__all__ = [
    "DISK4",
    "METHODS",
    "EvalReport",
    "RocCurve",
    "binarize",
    "evaluate",
    "open_disk4",
    "patch_positions",
    "region_overlap_quantiles",
    "residual_for",
    "roc_curve",
    "strided_apply",
    "strided_reconstruct",
]

METHODS = ("L2", "SSIM", "VAE", "FM")
_COMPATIBLE = {"L2": {"AE", "FM-AE"}, "SSIM": {"AE", "FM-AE"}, "VAE": {"VAE"}, "FM": {"FM-AE"}}

# radius-2 Euclidean disk: 13 offsets
_yy, _xx = np.mgrid[-2:3, -2:3]
DISK4 = (_yy ** 2 + _xx ** 2) <= 4
del _yy, _xx

_EIGHT = np.ones((3, 3), dtype=bool)


# ---------------------------------------------------------------------
# Strided inference
# ---------------------------------------------------------------------
def patch_positions(dim: int, patch: int, stride: int) -> list[int]:
    """Top-left offsets ``0, s, 2s, ...`` plus ``dim - patch`` so the far edge is covered."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if dim < patch:
        raise ValueError(f"extent {dim} smaller than patch {patch}")
    return sorted(set(range(0, dim - patch + 1, stride)) | {dim - patch})


def strided_apply(fn: Callable[[np.ndarray], np.ndarray], img: np.ndarray, patch: int = 128,
                  stride: int = 30, batch_size: int = 32) -> np.ndarray:
    """
    Apply ``fn`` (a ``(B, p, p) -> (B, p, p)`` map) on overlapping patches and
    average the outputs wherever patches overlap.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    tops = patch_positions(h, patch, stride)
    lefts = patch_positions(w, patch, stride)
    coords = [(t, l) for t in tops for l in lefts]
    # extended-precision sums keep the mean of identical values exact
    acc = np.zeros((h, w), dtype=np.longdouble)
    hits = np.zeros((h, w), dtype=np.longdouble)
    for start in range(0, len(coords), batch_size):
        chunk = coords[start:start + batch_size]
        batch = np.stack([img[t:t + patch, l:l + patch] for t, l in chunk])
        out = np.asarray(fn(batch), dtype=np.float64)
        for (t, l), o in zip(chunk, out):
            acc[t:t + patch, l:l + patch] += o
            hits[t:t + patch, l:l + patch] += 1
    return (acc / hits).astype(np.float64)


def _model_fn(net) -> Callable[[np.ndarray], np.ndarray]:
    def fn(batch: np.ndarray) -> np.ndarray:
        # float64 in; parametric nets cast to their own dtype
        return reconstruct(net, torch.as_tensor(batch[:, None]))[:, 0].double().numpy()
    return fn


def strided_reconstruct(net, img, stride: int = 30, patch: int = 128, batch_size: int = 32) -> np.ndarray:
    """Full-image reconstruction averaged over all covering patches."""
    return strided_apply(_model_fn(net), img, patch, stride, batch_size)


def residual_for(method: str, net, img, params: SsimParams = SsimParams(), *, stride: int = 30,
                 vae_samples: int = 6, seed: int = 0, patch: int = 128) -> np.ndarray:
    """
    Residual map for one full image.

    L2, SSIM and FM compare ``img`` with its strided reconstruction (FM uses
    the per-pixel squared difference). VAE averages the N-sample residual of
    each patch over the same stride grid.
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    spec = getattr(net, "spec", None)
    if spec is not None and spec.variant not in _COMPATIBLE[method]:
        raise ValueError(f"{method} residuals are not defined for a {spec.variant} model")
    img = np.asarray(img, dtype=np.float64)
    if method == "VAE":
        counter = iter(range(1 << 30))

        def fn(batch):
            return vae_residual(net, torch.as_tensor(batch[:, None], dtype=torch.float32),
                                n=vae_samples, seed=seed + next(counter))
        return strided_apply(fn, img, patch, stride)
    x_hat = strided_reconstruct(net, img, stride, patch)
    if method == "SSIM":
        return ssim_residual(img, x_hat, params)
    return l2_residual(img, x_hat)


# ---------------------------------------------------------------------
# Thresholding and morphology
# ---------------------------------------------------------------------
def binarize(res, threshold: float) -> np.ndarray:
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return np.asarray(res) > threshold


def open_disk4(mask) -> np.ndarray:
    """Opening with the 13-pixel disk; pixels outside the image count as background."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, DISK4, border_value=0)
    return ndimage.binary_dilation(eroded, DISK4, border_value=0)


# ---------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------
@dataclass
class RocCurve:
    """Points ordered by descending threshold; both rates are non-decreasing."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        rows = ["threshold,fpr,tpr"]
        rows += [f"{t:.10g},{f:.10g},{p:.10g}" for t, f, p in zip(self.thresholds, self.fpr, self.tpr)]
        return "\n".join(rows) + "\n"


def _pooled(residuals, masks):
    if len(residuals) != len(masks) or not residuals:
        raise ValueError("need equally many residual maps and masks (at least one)")
    for r, m in zip(residuals, masks):
        if np.shape(r) != np.shape(m):
            raise ValueError(f"residual {np.shape(r)} and mask {np.shape(m)} shapes differ")
    scores = np.concatenate([np.ravel(r) for r in residuals]).astype(np.float64)
    labels = np.concatenate([np.ravel(m) for m in masks]).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ground truth must contain both defect and background pixels")
    return scores, labels, n_pos, n_neg


def _sweep_thresholds(scores: np.ndarray, n_thresholds: int | None) -> np.ndarray:
    uniq = np.unique(scores)
    if n_thresholds is None or n_thresholds >= len(uniq):
        inner = uniq
    else:
        # thresholds are actual scores, so the sweep commutes with monotone transforms
        inner = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, n_thresholds), method="lower"))
    return inner[::-1]


def _trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    order = np.lexsort((tpr, fpr))
    return float(np.trapezoid(tpr[order], fpr[order]))


def _confusion(residuals, masks, t, apply_opening):
    tp = fp = 0
    for r, m in zip(residuals, masks):
        det = binarize(r, t)
        if apply_opening:
            det = open_disk4(det)
        tp += int(np.count_nonzero(det & m))
        fp += int(np.count_nonzero(det & ~m))
    return tp, fp


def roc_curve(residuals: Sequence[np.ndarray], masks: Sequence[np.ndarray], n_thresholds: int | None = 256,
              apply_opening: bool = True) -> RocCurve:
    """
    Dataset-wide pixel ROC.

    Thresholds are ``n_thresholds`` quantiles of the pooled scores (every
    distinct score when ``None`` or when there are fewer distinct values),
    bracketed by sentinels at ``max + 1`` and ``min - 1`` whose points are
    (0, 0) and (1, 1) by definition. A pixel is positive iff its score is
    strictly above the threshold.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    scores, labels, n_pos, n_neg = _pooled(residuals, masks)
    inner = _sweep_thresholds(scores, n_thresholds)

    if apply_opening:
        counts = [_confusion(residuals, masks, t, True) for t in inner]
        tp = np.array([c[0] for c in counts], dtype=np.float64)
        fp = np.array([c[1] for c in counts], dtype=np.float64)
    else:
        # count scores strictly above each threshold via sorted search
        pos = np.sort(scores[labels])
        neg = np.sort(scores[~labels])
        tp = (n_pos - np.searchsorted(pos, inner, side="right")).astype(np.float64)
        fp = (n_neg - np.searchsorted(neg, inner, side="right")).astype(np.float64)

    thresholds = np.concatenate([[scores.max() + 1.0], inner, [scores.min() - 1.0]])
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    return RocCurve(thresholds, fpr, tpr, _trapezoid(fpr, tpr))


# ---------------------------------------------------------------------
# Per-region overlap
# ---------------------------------------------------------------------
@dataclass
class OverlapAtFpr:
    target_fpr: float
    achieved_fpr: float
    threshold: float
    quantiles: dict[float, float]
    overlaps: np.ndarray = field(repr=False)


def region_overlap_quantiles(residuals: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                             fprs: Sequence[float], ps: Sequence[float] = (0.25, 0.5, 0.75),
                             n_thresholds: int | None = 256, apply_opening: bool = True,
                             roc: RocCurve | None = None) -> list[OverlapAtFpr]:
    """
    Fraction of each ground-truth defect region covered by the detection.

    Regions are 8-connected components of the masks. For each target FPR the
    operating point is the most permissive swept threshold whose dataset FPR
    does not exceed the target. Quantiles use lower interpolation.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    labelled = [ndimage.label(m, structure=_EIGHT) for m in masks]
    if sum(n for _, n in labelled) == 0:
        raise ValueError("no defect regions in the dataset")
    if roc is None:
        roc = roc_curve(residuals, masks, n_thresholds, apply_opening)

    results = []
    for target in fprs:
        ok = np.flatnonzero(roc.fpr[:-1] <= target + 1e-12)  # the (1, 1) sentinel is not a real threshold
        i = ok[-1]
        t = float(roc.thresholds[i])
        overlaps = []
        for r, (lab, n) in zip(residuals, labelled):
            det = binarize(r, t)
            if apply_opening:
                det = open_disk4(det)
            if n == 0:
                continue
            region_sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
            hit = np.bincount(lab[det].ravel(), minlength=n + 1)[1:]
            overlaps.extend(hit / region_sizes)
        overlaps = np.asarray(overlaps, dtype=np.float64)
        qs = {p: float(np.quantile(overlaps, p, method="lower")) for p in ps}
        results.append(OverlapAtFpr(float(target), float(roc.fpr[i]), t, qs, overlaps))
    return results


# ---------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------
@dataclass
class EvalReport:
    method: str
    auc: float
    roc: RocCurve
    overlaps: list[OverlapAtFpr]
    n_images: int
    seconds_per_image: float
    residual_ranges: list[tuple[str, float, float]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"method {self.method}", f"images {self.n_images}", f"auc {self.auc:.6f}"]
        for o in self.overlaps:
            qs = " ".join(f"q{int(round(p * 100))} {v:.6f}" for p, v in sorted(o.quantiles.items()))
            lines.append(f"overlap fpr {o.target_fpr:g} achieved {o.achieved_fpr:.6f} "
                         f"threshold {o.threshold:.8g} regions {len(o.overlaps)} {qs}")
        lines.append(f"runtime sec_per_image {self.seconds_per_image:.4f}")
        for name, lo, hi in self.residual_ranges:
            lines.append(f"residual {name} min {lo:.8g} max {hi:.8g}")
        return "\n".join(lines) + "\n"


def load_test_set(manifest: DatasetManifest, resize: int | None = None):
    """Yield ``(name, image, mask)``; masks are resized alongside images."""
    for img_path, mask_path in manifest.test_images:
        img = load_image(img_path)
        mask = load_mask(mask_path)
        if img.shape != mask.shape:
            raise ValueError(f"{mask_path}: mask shape differs from image")
        if resize:
            img = downscale_bilinear(img, resize, resize)
            mask = downscale_bilinear(mask.astype(np.float64), resize, resize) > 0.5
        yield Path(img_path).stem, img, mask


def evaluate(net, manifest: DatasetManifest, method: str, params: SsimParams = SsimParams(), *,
             stride: int = 30, apply_opening: bool = True, n_thresholds: int | None = 256,
             fprs: Sequence[float] = (), vae_samples: int = 6, seed: int = 0, resize: int | None = None,
             on_residual: Callable[[str, np.ndarray, np.ndarray], None] | None = None) -> EvalReport:
    """Residual maps for every test image, then ROC/AUC and region overlaps."""
    residuals, masks, names = [], [], []
    t0 = time.perf_counter()
    for i, (name, img, mask) in enumerate(load_test_set(manifest, resize)):
        res = residual_for(method, net, img, params, stride=stride, vae_samples=vae_samples, seed=seed + 7919 * i)
        residuals.append(res)
        masks.append(mask)
        names.append(name)
        if on_residual is not None:
            on_residual(name, img, res)
    if not residuals:
        raise ValueError("manifest has no test images")
    per_image = (time.perf_counter() - t0) / len(residuals)
    roc = roc_curve(residuals, masks, n_thresholds, apply_opening)
    overlaps = region_overlap_quantiles(residuals, masks, fprs, roc=roc, apply_opening=apply_opening) if fprs else []
    ranges = [(n, float(r.min()), float(r.max())) for n, r in zip(names, residuals)]
    return EvalReport(method.upper(), roc.auc, roc, overlaps, len(residuals), per_image, ranges)
