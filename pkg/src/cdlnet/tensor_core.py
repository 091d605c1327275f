"""Strided convolutional operators and the small primitives built on them.

Images are arrays of shape ``(..., H, W)`` and coefficient maps are arrays of
shape ``(..., M, Hs, Ws)`` with ``Hs = ceil(H / s)``.  Leading axes are batch
axes and are carried through untouched.

The analysis operator is a zero-padded "same" correlation evaluated on the
stride-``s`` grid ``(0, s, 2s, ...)``.  The synthesis operator is its exact
transpose, including the truncation at the image border, so that

    <conv_synthesis(z, W), x> == <z, conv_analysis(x, W)>

holds to rounding error for every stride and image size.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError

__all__ = [
    "FilterBank",
    "coeff_shape",
    "conv_analysis",
    "conv_synthesis",
    "conv_filter_grad",
    "zero_fill",
    "subsample",
    "soft_threshold",
    "project_unit_ball",
    "spectral_norm",
    "count_macs",
]


@dataclass(frozen=True)
class FilterBank:
    """``M`` square filters of size ``p x p`` applied with stride ``s``."""

    weights: np.ndarray
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ContractError(f"filter weights must have shape (M, p, p), got {w.shape}")
        if int(self.stride) < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")
        if not np.all(np.isfinite(w)):
            raise NumericError("filter bank contains non-finite weights")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def filter_size(self) -> int:
        return self.weights.shape[1]

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.weights.astype(np.float64) ** 2, axis=(1, 2)))

    def astype(self, dtype) -> FilterBank:
        return FilterBank(self.weights.astype(dtype), self.stride)


# Multiply-accumulate instrumentation.  A context variable keeps concurrent
# callers from seeing each other's counts.
_mac_counter: contextvars.ContextVar = contextvars.ContextVar("cdlnet_macs", default=None)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates done by analysis/synthesis inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    box = [0]
    token = _mac_counter.set(box)
    try:
        yield box
    finally:
        _mac_counter.reset(token)


def _tally(n):
    box = _mac_counter.get()
    if box is not None:
        box[0] += int(n)


def _pads(p):
    lo = (p - 1) // 2
    return lo, p - 1 - lo


def coeff_shape(height, width, stride):
    """Coefficient grid size ``(ceil(H/s), ceil(W/s))``."""
    return -(-height // stride), -(-width // stride)


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}", where=what)


def _windows(x, p, s):
    """Padded ``p x p`` patches at the stride grid: ``(..., Hs, Ws, p*p)``."""
    lo, hi = _pads(p)
    pad = [(0, 0)] * (x.ndim - 2) + [(lo, hi), (lo, hi)]
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, (p, p), axis=(-2, -1))[..., ::s, ::s, :, :]
    hs, ws = coeff_shape(x.shape[-2], x.shape[-1], s)
    win = win[..., :hs, :ws, :, :]
    return win.reshape(*win.shape[:-2], p * p)


def conv_analysis(x, bank: FilterBank) -> np.ndarray:
    """Apply the analysis operator ``Δ_sᵀ Wᵀ``: correlate ``x`` with every filter.

    Parameters
    ----------
    x : array, shape (..., H, W)
    bank : FilterBank

    Returns
    -------
    array, shape (..., M, ceil(H/s), ceil(W/s))
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ContractError(f"image must be at least 2-D, got shape {x.shape}")
    _check_finite(x, "analysis input")
    m, p = bank.num_filters, bank.filter_size
    s = bank.stride
    dtype = np.result_type(x, bank.weights)
    win = _windows(x.astype(dtype, copy=False), p, s)
    hs, ws = win.shape[-3], win.shape[-2]
    lead = x.shape[:-2]
    cols = win.reshape(-1, hs * ws, p * p)
    w2 = bank.weights.astype(dtype, copy=False).reshape(m, p * p)
    out = np.matmul(w2, cols.transpose(0, 2, 1))
    _tally(out.size * p * p)
    return out.reshape(*lead, m, hs, ws)


def conv_synthesis(z, bank: FilterBank, shape=None) -> np.ndarray:
    """Apply the synthesis operator ``W Δ_s``: zero-fill ``z`` and sum the per-channel convolutions.

    ``shape`` is the output image size ``(H, W)``; it defaults to
    ``(Hs * s, Ws * s)`` and must satisfy ``ceil(H/s) == Hs``.
    """
    z = np.asarray(z)
    m, p, s = bank.num_filters, bank.filter_size, bank.stride
    if z.ndim < 3 or z.shape[-3] != m:
        raise ContractError(
            f"coefficient map with {z.shape[-3] if z.ndim >= 3 else '?'} channels "
            f"does not match a bank of {m} filters"
        )
    _check_finite(z, "synthesis input")
    hs, ws = z.shape[-2:]
    if shape is None:
        shape = (hs * s, ws * s)
    h, w = int(shape[0]), int(shape[1])
    if coeff_shape(h, w, s) != (hs, ws):
        raise ContractError(f"image shape {(h, w)} is incompatible with a {hs}x{ws} grid at stride {s}")
    dtype = np.result_type(z, bank.weights)
    lead = z.shape[:-3]
    w2 = bank.weights.astype(dtype, copy=False).reshape(m, p * p)
    # (pp, M) @ (B, M, L) -> (B, pp, L)
    taps = np.matmul(w2.T, z.astype(dtype, copy=False).reshape(-1, m, hs * ws))
    _tally(taps.size * m)
    taps = taps.reshape(-1, p, p, hs, ws)
    lo, hi = _pads(p)
    hp = max(h + lo + hi, s * (hs - 1) + p)
    wp = max(w + lo + hi, s * (ws - 1) + p)
    xp = np.zeros((taps.shape[0], hp, wp), dtype=dtype)
    for a in range(p):
        for b in range(p):
            xp[:, a:a + s * hs:s, b:b + s * ws:s] += taps[:, a, b]
    return xp[:, lo:lo + h, lo:lo + w].reshape(*lead, h, w)


def conv_filter_grad(x, c, filter_size: int, stride: int) -> np.ndarray:
    """Gradient of ``<c, conv_analysis(x, W)>`` with respect to the weights of ``W``.

    Equally, for ``x = conv_synthesis(c, W)`` and an upstream image gradient
    ``g``, ``conv_filter_grad(g, c, ...)`` is the weight gradient.  Batch axes
    are summed.  Returns an array of shape ``(M, p, p)``.
    """
    x = np.asarray(x)
    c = np.asarray(c)
    p, s = filter_size, stride
    m, hs, ws = c.shape[-3:]
    dtype = np.result_type(x, c)
    win = _windows(x.astype(dtype, copy=False), p, s)
    if win.shape[-3:-1] != (hs, ws):
        raise ContractError("coefficient grid does not match image at this stride")
    cols = win.reshape(-1, p * p)
    cm = np.moveaxis(c.astype(dtype, copy=False).reshape(-1, m, hs * ws), 1, 0).reshape(m, -1)
    return (cm @ cols).reshape(m, p, p)


def zero_fill(z, stride: int) -> np.ndarray:
    """``Δ_s``: place ``z[..., i, j]`` at ``(s*i, s*j)`` of a zero grid of size ``(s*Hs, s*Ws)``."""
    z = np.asarray(z)
    hs, ws = z.shape[-2:]
    out = np.zeros(z.shape[:-2] + (hs * stride, ws * stride), dtype=z.dtype)
    out[..., ::stride, ::stride] = z
    return out


def subsample(x, stride: int) -> np.ndarray:
    """``Δ_sᵀ``: keep samples at ``(s*i, s*j)``."""
    return np.asarray(x)[..., ::stride, ::stride].copy()


def soft_threshold(z, tau) -> np.ndarray:
    """Channel-wise soft-thresholding ``sign(z) * max(|z| - tau, 0)``.

    ``tau`` has shape ``(M,)`` or, for a batch with per-sample thresholds,
    ``(N, M)``.
    """
    z = np.asarray(z)
    tau = np.asarray(tau, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    if np.any(tau < 0):
        raise ContractError("soft-threshold requires non-negative thresholds")
    t = tau[..., None, None]
    return z - np.clip(z, -t, t)


def project_unit_ball(bank):
    """Rescale every filter with norm above one onto the unit sphere.

    Accepts a :class:`FilterBank` or a raw ``(..., p, p)`` weight array and
    returns the same kind.  Filters already inside the ball are returned
    bit-for-bit unchanged.
    """
    if isinstance(bank, FilterBank):
        return FilterBank(project_unit_ball(bank.weights), bank.stride)
    w = np.asarray(bank)
    sq = np.sum(w.astype(np.float64) ** 2, axis=(-2, -1))
    out = w.copy()
    big = sq > 1.0
    if np.any(big):
        out[big] = (w[big] / np.sqrt(sq[big])[:, None, None]).astype(w.dtype)
        # rounding can leave the squared norm a hair above one
        over = np.sum(out.astype(np.float64) ** 2, axis=(-2, -1)) > 1.0
        while np.any(over):
            out[over] = np.nextafter(out[over], 0).astype(w.dtype)
            over = np.sum(out.astype(np.float64) ** 2, axis=(-2, -1)) > 1.0
    return out


def spectral_norm(bank: FilterBank, shape=(64, 64), iters: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of the synthesis operator on an ``H x W`` image domain.

    Power iteration on ``(Δ_sᵀWᵀ)(WΔ_s)`` from a seeded standard-normal start,
    run in float64 until the relative change drops below ``tol`` or ``iters``
    iterations have been taken.
    """
    if iters < 1:
        raise ContractError("iters must be >= 1")
    bank = bank.astype(np.float64)
    h, w = shape
    hs, ws = coeff_shape(h, w, bank.stride)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((bank.num_filters, hs, ws))
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = conv_synthesis(v, bank, (h, w))
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            return 0.0
        v = conv_analysis(u, bank)
        v /= np.linalg.norm(v)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(conv_synthesis(v, bank, (h, w))))
