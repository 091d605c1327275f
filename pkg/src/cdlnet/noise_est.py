"""Blind estimation of the AWGN standard deviation of a single image."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .errors import ContractError

MAD_CONSISTENCY = 0.6745


class Method(str, enum.Enum):
    MAD = "mad"
    PCA = "pca"
    GROUND_TRUTH = "gt"


@dataclass(frozen=True)
class EstimatorConfig:
    method: Method = Method.PCA
    pca_patch_size: int = 7
    pca_max_patches: int = 10000
    pca_tail_fraction: float = 0.25
    pca_quantile: float = 0.95
    pca_max_iters: int = 10

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.pca_patch_size < 2:
            raise ContractError("pca_patch_size must be >= 2")
        if self.pca_max_patches < 1:
            raise ContractError("pca_max_patches must be >= 1")
        if not 0 < self.pca_tail_fraction <= 1:
            raise ContractError("pca_tail_fraction must lie in (0, 1]")
        if not 0 < self.pca_quantile < 1:
            raise ContractError("pca_quantile must lie in (0, 1)")


def haar_diagonal(y) -> np.ndarray:
    """Finest diagonal (HH) subband of a one-level orthonormal 2-D Haar transform.

    An odd trailing row or column is dropped.
    """
    y = np.asarray(y, dtype=np.float64)
    h, w = (y.shape[0] // 2) * 2, (y.shape[1] // 2) * 2
    y = y[:h, :w]
    return 0.5 * (y[0::2, 0::2] - y[0::2, 1::2] - y[1::2, 0::2] + y[1::2, 1::2])


def estimate_mad(y) -> float:
    """``median(|HH|) / 0.6745`` on the Haar diagonal subband."""
    y = np.asarray(y)
    if y.ndim != 2 or min(y.shape) < 2:
        raise ContractError(f"MAD estimation needs a 2-D image of at least 2x2, got {y.shape}")
    return float(np.median(np.abs(haar_diagonal(y))) / MAD_CONSISTENCY)


def _patches(y, p, max_patches):
    win = sliding_window_view(y, (p, p))
    nh, nw = win.shape[:2]
    step = max(1, math.ceil(math.sqrt(nh * nw / max_patches)))
    return win[::step, ::step].reshape(-1, p * p)


def _min_eig(patches):
    """Smallest covariance eigenvalue, corrected for the Marchenko-Pastur lower edge."""
    n, d = patches.shape
    cov = np.cov(patches, rowvar=False)
    lam = float(np.linalg.eigvalsh(cov)[0])
    edge = (1.0 - math.sqrt(d / n)) ** 2
    return max(lam, 0.0) / edge


def estimate_pca(y, cfg: EstimatorConfig | None = None) -> float:
    """Noise level from the smallest eigenvalue of weak-texture patch covariance.

    Starting from all patches, repeatedly keep the patches whose sample
    variance is plausible for pure noise at the current estimate (below the
    ``pca_quantile`` of the scaled chi-square law), never fewer than the
    ``pca_tail_fraction`` lowest-variance ones, and re-estimate until the
    variance estimate stops moving.  Falls back to MAD when the image yields
    too few patches for a covariance estimate.
    """
    cfg = cfg or EstimatorConfig()
    y = np.asarray(y, dtype=np.float64)
    p = cfg.pca_patch_size
    if y.ndim != 2 or min(y.shape) < p:
        raise ContractError(f"PCA estimation needs an image of at least {p}x{p}, got {y.shape}")
    P = _patches(y, p, cfg.pca_max_patches)
    n, d = P.shape
    if n < 4 * d:
        warnings.warn(f"only {n} patches for PCA noise estimation; falling back to MAD", RuntimeWarning, stacklevel=2)
        return estimate_mad(y)
    var = P.var(axis=1, ddof=1)
    order = np.argsort(var, kind="stable")
    n_tail = max(int(math.ceil(cfg.pca_tail_fraction * n)), 2 * d)
    scale = stats.chi2.ppf(cfg.pca_quantile, d - 1) / (d - 1)

    s2 = _min_eig(P)
    for _ in range(cfg.pca_max_iters):
        keep = var <= s2 * scale
        sel = P[keep] if keep.sum() >= n_tail else P[order[:n_tail]]
        new = _min_eig(sel)
        done = abs(new - s2) <= 1e-6 * max(s2, np.finfo(float).tiny)
        s2 = new
        if done:
            break
    return math.sqrt(s2)


def estimate(y, cfg: EstimatorConfig | None = None, sigma_true=None) -> float:
    """Dispatch on ``cfg.method``; ``GROUND_TRUTH`` returns ``sigma_true``."""
    cfg = cfg or EstimatorConfig()
    if cfg.method is Method.MAD:
        return estimate_mad(y)
    if cfg.method is Method.PCA:
        return estimate_pca(y, cfg)
    if sigma_true is None:
        raise ContractError("ground-truth estimation needs sigma_true")
    return float(sigma_true)


def universal_threshold(sigma: float, N: int) -> float:
    """``sigma * sqrt(2 ln N)``."""
    if N < 1:
        raise ContractError("N must be >= 1")
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    return float(sigma * math.sqrt(2.0 * math.log(N)))
