"""
Structural similarity and per-pixel losses.

The numpy functions (``patch_stats`` ... ``ssim_residual``, ``l2_residual``)
are the float64 evaluation path. ``ssim_loss`` and ``l2_loss`` operate on
torch tensors of shape ``(B, 1, H, W)`` and are differentiated by autograd.

SSIM uses a uniform K x K window, population statistics and the stability
constants ``c1``, ``c2`` as plain additive terms:

    l = (2 mu_p mu_q + c1) / (mu_p^2 + mu_q^2 + c1)
    c = (2 sd_p sd_q + c2) / (var_p + var_q + c2)
    s = (2 cov_pq + c2)    / (2 sd_p sd_q + c2)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "PatchStats",
    "SsimMaps",
    "SsimParams",
    "l2_loss",
    "l2_residual",
    "patch_stats",
    "ssim_components",
    "ssim_loss",
    "ssim_map",
    "ssim_map_torch",
    "ssim_patch",
    "ssim_residual",
]


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    c1: float = 0.01
    c2: float = 0.03
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        k = self.window_size
        if int(k) != k or k < 3 or k % 2 == 0:
            raise ValueError(f"window_size must be an odd integer >= 3, got {k}")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")

    @property
    def unit_exponents(self) -> bool:
        return self.alpha == 1 and self.beta == 1 and self.gamma == 1


@dataclass(frozen=True)
class PatchStats:
    mu_p: float
    mu_q: float
    var_p: float
    var_q: float
    cov_pq: float


@dataclass
class SsimMaps:
    l_map: np.ndarray
    c_map: np.ndarray
    s_map: np.ndarray
    ssim_map: np.ndarray


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------
# Patch level
# ---------------------------------------------------------------------
def patch_stats(p, q) -> PatchStats:
    """Population mean, variance and covariance of two equally sized patches."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _same_shape(p, q)
    if p.size == 0:
        raise ValueError("empty patch")
    mu_p, mu_q = p.mean(), q.mean()
    dp, dq = p - mu_p, q - mu_q
    return PatchStats(
        mu_p=float(mu_p),
        mu_q=float(mu_q),
        var_p=float(np.mean(dp * dp)),
        var_q=float(np.mean(dq * dq)),
        cov_pq=float(np.mean(dp * dq)),
    )


def _components(mu_p, mu_q, var_p, var_q, cov, c1, c2):
    sd_pq = np.sqrt(np.maximum(var_p, 0.0)) * np.sqrt(np.maximum(var_q, 0.0))
    l = (2.0 * mu_p * mu_q + c1) / (mu_p * mu_p + mu_q * mu_q + c1)
    c = (2.0 * sd_pq + c2) / (var_p + var_q + c2)
    s = (2.0 * cov + c2) / (2.0 * sd_pq + c2)
    return l, c, s


def _combine(l, c, s, params: SsimParams):
    if params.unit_exponents:
        return l * c * s
    if float(params.gamma) != int(params.gamma) and np.any(np.asarray(s) < 0):
        raise ValueError("non-integer gamma is undefined for negative structure values")
    return np.power(l, params.alpha) * np.power(c, params.beta) * np.power(s, params.gamma)


def ssim_components(stats: PatchStats, params: SsimParams = SsimParams()) -> tuple[float, float, float]:
    """Luminance, contrast and structure comparisons for one window."""
    l, c, s = _components(stats.mu_p, stats.mu_q, stats.var_p, stats.var_q, stats.cov_pq,
                          params.c1, params.c2)
    return float(l), float(c), float(s)


def ssim_patch(p, q, params: SsimParams = SsimParams()) -> float:
    l, c, s = ssim_components(patch_stats(p, q), params)
    return float(_combine(l, c, s, params))


# ---------------------------------------------------------------------
# Image level (numpy)
# ---------------------------------------------------------------------
def _box_mean_valid(a: np.ndarray, k: int) -> np.ndarray:
    """Mean over every fully contained k x k window (``valid`` box filter)."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    tot = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    return tot / (k * k)


def ssim_map(x, x_hat, params: SsimParams = SsimParams()) -> SsimMaps:
    """
    Slide a K x K window over both images and evaluate SSIM at every centre.

    Pixels closer than K // 2 to an edge have no complete window; all four
    maps are set to 1 there (no anomaly).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_hat, dtype=np.float64)
    _same_shape(x, y)
    if x.ndim != 2:
        raise ValueError("images must be 2-D")
    k = params.window_size
    h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than {k}x{k} window")

    # centring first keeps the integral-image sums small
    shift = 0.5 * (x.mean() + y.mean())
    xc, yc = x - shift, y - shift
    mx = _box_mean_valid(xc, k)
    my = _box_mean_valid(yc, k)
    vx = _box_mean_valid(xc * xc, k) - mx * mx
    vy = _box_mean_valid(yc * yc, k) - my * my
    cov = _box_mean_valid(xc * yc, k) - mx * my
    vx = np.maximum(vx, 0.0)
    vy = np.maximum(vy, 0.0)
    l, c, s = _components(mx + shift, my + shift, vx, vy, cov, params.c1, params.c2)
    ssim = _combine(l, c, s, params)

    r = k // 2
    maps = []
    for inner in (l, c, s, ssim):
        full = np.ones((h, w))
        full[r:h - r, r:w - r] = inner
        maps.append(full)
    return SsimMaps(*maps)


def ssim_residual(x, x_hat, params: SsimParams = SsimParams()) -> np.ndarray:
    """Anomaly score ``(1 - SSIM) / 2`` in [0, 1]; zero on the window border."""
    sm = ssim_map(x, x_hat, params).ssim_map
    return np.clip((1.0 - sm) / 2.0, 0.0, 1.0)


def l2_residual(x, x_hat) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_hat, dtype=np.float64)
    _same_shape(x, y)
    d = x - y
    return d * d


# ---------------------------------------------------------------------
# Losses (torch)
# ---------------------------------------------------------------------
def _check_batch(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) tensors, got {tuple(x.shape)}")


def ssim_map_torch(x: torch.Tensor, y: torch.Tensor, params: SsimParams = SsimParams()) -> torch.Tensor:
    """SSIM over the valid interior, shape ``(B, C, H - K + 1, W - K + 1)``."""
    _check_batch(x, y)
    k = params.window_size
    if x.shape[-2] < k or x.shape[-1] < k:
        raise ValueError(f"images smaller than {k}x{k} window")
    pool = lambda t: F.avg_pool2d(t, k, stride=1)  # noqa: E731
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx * mx
    vy = pool(y * y) - my * my
    cov = pool(x * y) - mx * my
    c1, c2 = params.c1, params.c2
    if params.unit_exponents:
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        return num / den
    # sqrt is not differentiable at 0, so keep variances strictly positive here
    sd = torch.sqrt(vx.clamp_min(1e-12)) * torch.sqrt(vy.clamp_min(1e-12))
    l = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    c = (2 * sd + c2) / (vx + vy + c2)
    s = (2 * cov + c2) / (2 * sd + c2)
    if params.gamma != math.floor(params.gamma) and bool((s < 0).any()):
        raise ValueError("non-integer gamma is undefined for negative structure values")
    return l.pow(params.alpha) * c.pow(params.beta) * s.pow(params.gamma)


def ssim_loss(x: torch.Tensor, x_hat: torch.Tensor, params: SsimParams = SsimParams()) -> torch.Tensor:
    """Mean of ``1 - SSIM`` over the batch and all interior window positions."""
    return (1.0 - ssim_map_torch(x, x_hat, params)).mean()


def l2_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Sum of squared pixel differences per image, averaged over the batch."""
    _check_batch(x, x_hat)
    return ((x - x_hat) ** 2).flatten(1).sum(1).mean()
