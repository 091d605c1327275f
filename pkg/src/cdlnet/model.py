"""The unrolled convolutional dictionary learning network.

Each of the ``K`` layers performs one learned ISTA step

    z <- ST(z - A_kᵀ(B_k z - y), tau_k)

starting from ``z = 0``, and the output image is ``D z``.  With adaptive
thresholds the stored per-layer vectors are gains ``lambda_k`` and the
thresholds used are ``lambda_k * sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ContractError, NumericError
from .tensor_core import (
    FilterBank,
    coeff_shape,
    conv_analysis,
    conv_synthesis,
    project_unit_ball,
    soft_threshold,
    spectral_norm,
)

DEFAULT_THRESHOLD = 1e-2


@dataclass(frozen=True)
class ModelConfig:
    K: int = 20
    M: int = 32
    filter_size: int = 7
    stride: int = 1
    adaptive: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("K", "M", "filter_size", "stride"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")

    @classmethod
    def small(cls, **kw):
        return cls(**{"K": 20, "M": 32, "stride": 1, **kw})

    @classmethod
    def big(cls, **kw):
        return cls(**{"K": 30, "M": 169, "stride": 2, **kw})

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelParams:
    """Learned parameters, stored as stacked arrays.

    ``A`` and ``B`` have shape ``(K, M, p, p)``, ``D`` has shape ``(M, p, p)``
    and ``thresholds`` has shape ``(K, M)``.
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    thresholds: np.ndarray
    stride: int = 1
    adaptive: bool = False

    NAMES = ("A", "B", "D", "thresholds")

    @property
    def K(self):
        return self.A.shape[0]

    @property
    def M(self):
        return self.D.shape[0]

    @property
    def filter_size(self):
        return self.D.shape[-1]

    @property
    def dtype(self):
        return self.D.dtype

    def analysis_bank(self, k) -> FilterBank:
        return FilterBank(self.A[k], self.stride)

    def synthesis_bank(self, k) -> FilterBank:
        return FilterBank(self.B[k], self.stride)

    def dictionary(self) -> FilterBank:
        return FilterBank(self.D, self.stride)

    def arrays(self):
        return {name: getattr(self, name) for name in self.NAMES}

    def replace(self, **arrays) -> ModelParams:
        return replace(self, **arrays)

    def copy(self) -> ModelParams:
        return self.replace(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> ModelParams:
        return self.replace(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def zeros_like(self) -> ModelParams:
        return self.replace(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def validate(self):
        if self.D.ndim != 3 or self.D.shape[1] != self.D.shape[2]:
            raise ContractError(f"D must have shape (M, p, p), got {self.D.shape}")
        if int(self.stride) < 1:
            raise ContractError("stride must be >= 1")
        K, M, p = self.K, self.M, self.filter_size
        if self.A.shape != (K, M, p, p) or self.B.shape != (K, M, p, p):
            raise ContractError("A and B must have shape (K, M, p, p) matching D")
        if self.thresholds.shape != (K, M):
            raise ContractError(f"thresholds must have shape {(K, M)}, got {self.thresholds.shape}")
        return self


def init_params(cfg: ModelConfig, sigma_mid: float = 25 / 255, dtype=np.float32, norm_shape=(128, 128)) -> ModelParams:
    """Draw one standard-normal filter bank, share it across every operator, and normalise.

    The shared bank is divided by the spectral norm of its synthesis operator
    (measured on a ``norm_shape`` domain).  Thresholds start at 1e-2; adaptive
    gains start at ``1e-2 / sigma_mid`` so the initial thresholds agree.
    """
    rng = np.random.default_rng(cfg.seed)
    w = rng.standard_normal((cfg.M, cfg.filter_size, cfg.filter_size))
    L = spectral_norm(FilterBank(w, cfg.stride), norm_shape, iters=50, tol=1e-6)
    w = (w / L).astype(dtype)
    if cfg.adaptive:
        if sigma_mid <= 0:
            raise ContractError("adaptive initialisation needs a positive sigma_mid")
        thr = DEFAULT_THRESHOLD / sigma_mid
    else:
        thr = DEFAULT_THRESHOLD
    return ModelParams(
        A=np.repeat(w[None], cfg.K, axis=0),
        B=np.repeat(w[None], cfg.K, axis=0),
        D=w.copy(),
        thresholds=np.full((cfg.K, cfg.M), thr, dtype=dtype),
        stride=cfg.stride,
        adaptive=cfg.adaptive,
    )


def thresholds_at(params: ModelParams, k: int, sigma_n=None) -> np.ndarray:
    """Thresholds used at layer ``k``.

    Adaptive models scale the stored gains by ``sigma_n``; a vector of
    per-sample noise levels gives an ``(N, M)`` result.
    """
    if not 0 <= k < params.K:
        raise ContractError(f"layer index {k} out of range for K={params.K}")
    t = params.thresholds[k]
    if not params.adaptive:
        return t
    if sigma_n is None:
        raise ContractError("adaptive model requires a noise level sigma_n")
    sigma = np.asarray(sigma_n, dtype=t.dtype)
    if np.any(sigma < 0):
        raise ContractError("sigma_n must be >= 0")
    if sigma.ndim == 0:
        return t * sigma
    return sigma[:, None] * t[None, :]


@dataclass
class ForwardTrace:
    """Intermediates kept by :func:`forward` for the reverse pass."""

    y: np.ndarray
    z: list = field(default_factory=list)         # z^(0) .. z^(K)
    residual: list = field(default_factory=list)  # B_k z^(k) - y
    pre: list = field(default_factory=list)       # z^(k) - A_kᵀ residual
    tau: list = field(default_factory=list)
    sigma: np.ndarray | None = None


def forward(y, params: ModelParams, sigma_n=None, trace: bool = False):
    """Run the ``K`` unrolled layers on ``y`` (shape ``(..., H, W)``).

    Returns ``(x_hat, z_K)``, plus a :class:`ForwardTrace` when ``trace`` is
    set.  ``H`` and ``W`` need not be multiples of the stride.
    """
    y = np.asarray(y)
    if y.ndim < 2:
        raise ContractError("input image must be at least 2-D")
    if params.adaptive and sigma_n is None:
        raise ContractError("adaptive model requires a noise level sigma_n")
    params.validate()
    dtype = np.result_type(y, params.dtype)
    y = y.astype(dtype, copy=False)
    h, w = y.shape[-2:]
    hs, ws = coeff_shape(h, w, params.stride)
    z = np.zeros(y.shape[:-2] + (params.M, hs, ws), dtype=dtype)
    if sigma_n is not None and np.ndim(sigma_n) == 1 and y.ndim == 2:
        raise ContractError("per-sample sigma_n requires a batch of images")
    tr = ForwardTrace(y=y, sigma=None if sigma_n is None else np.asarray(sigma_n)) if trace else None
    if tr is not None:
        tr.z.append(z)
    for k in range(params.K):
        try:
            # z^(0) = 0, so the first synthesis is skipped
            r = -y if k == 0 else conv_synthesis(z, params.synthesis_bank(k), (h, w)) - y
            u = z - conv_analysis(r, params.analysis_bank(k))
        except NumericError as exc:
            raise NumericError(f"non-finite activation at layer {k} ({exc})", where=k) from None
        tau = thresholds_at(params, k, sigma_n)
        z = soft_threshold(u, tau)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation at layer {k}", where=k)
        if tr is not None:
            tr.residual.append(r)
            tr.pre.append(u)
            tr.tau.append(tau)
            tr.z.append(z)
    x_hat = conv_synthesis(z, params.dictionary(), (h, w))
    if trace:
        return x_hat, z, tr
    return x_hat, z


def complexity_estimate(cfg: ModelConfig, N=None, shape=None) -> int:
    """Exact multiply-accumulate count of one :func:`forward` call.

    Give either the pixel count ``N`` of a square image or ``shape=(H, W)``.
    Every layer runs one analysis and one synthesis (the first synthesis acts
    on ``z^(0) = 0`` and is skipped) and the output applies ``D`` once, giving
    ``2 K M p² ceil(H/s) ceil(W/s)``.
    """
    if shape is None:
        if N is None:
            raise ContractError("give N or shape")
        side = int(round(np.sqrt(N)))
        if side * side != N:
            raise ContractError("N must be a perfect square; pass shape=(H, W) otherwise")
        shape = (side, side)
    hs, ws = coeff_shape(shape[0], shape[1], cfg.stride)
    return 2 * cfg.K * cfg.M * cfg.filter_size ** 2 * hs * ws


def filter_grid(D, pad: int = 1) -> np.ndarray:
    """Tile the filters of ``D`` into one image, each normalised to ``[0, 1]``."""
    w = np.asarray(D.weights if isinstance(D, FilterBank) else D, dtype=np.float64)
    m, p, _ = w.shape
    cols = int(np.ceil(np.sqrt(m)))
    rows = int(np.ceil(m / cols))
    grid = np.zeros((rows * (p + pad) + pad, cols * (p + pad) + pad))
    for j in range(m):
        f = w[j]
        lo, hi = f.min(), f.max()
        f = (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)
        r, c = divmod(j, cols)
        grid[pad + r * (p + pad):pad + r * (p + pad) + p, pad + c * (p + pad):pad + c * (p + pad) + p] = f
    return grid


def project_params(params: ModelParams) -> ModelParams:
    """Unit-ball projection of every filter and clamping of thresholds at zero."""
    thr = np.maximum(params.thresholds, 0).astype(params.thresholds.dtype)
    return params.replace(
        A=project_unit_ball(params.A),
        B=project_unit_ball(params.B),
        D=project_unit_ball(params.D),
        thresholds=thr,
    )
