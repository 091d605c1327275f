"""Classical convolutional sparse coding: ISTA and alternating dictionary learning.

These solvers are the reference the unrolled network is checked against, so
they favour plainness over speed.  Everything runs in the dtype of the
inputs; pass float64 arrays for oracle-grade accuracy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor_core import (
    FilterBank,
    coeff_shape,
    conv_analysis,
    conv_filter_grad,
    conv_synthesis,
    project_unit_ball,
    soft_threshold,
    spectral_norm,
)


@dataclass
class LassoConfig:
    """Parameters of the ISTA solve.

    ``step_size=None`` selects ``1 / ||D Δ_s||²``.  A sequence of step sizes
    is used as a per-iteration schedule (the last entry repeats).
    """

    lam: float = 0.1
    step_size: float | list | None = None
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ContractError("tol must be > 0")
        if self.step_size is not None and np.any(np.asarray(self.step_size) <= 0):
            raise ContractError("step_size must be > 0")


@dataclass
class IstaResult:
    z: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    step_size_ok: bool = True


def lasso_objective(z, y, D: FilterBank, lam: float) -> float:
    """``0.5 * ||D z - y||² + lam * ||z||_1`` summed over any batch axes."""
    y = np.asarray(y)
    z = np.asarray(z)
    if z.shape[:-3] != y.shape[:-2]:
        raise ContractError(f"batch shapes differ: {z.shape} vs {y.shape}")
    r = conv_synthesis(z, D, y.shape[-2:]) - y
    return float(0.5 * np.sum(r * r) + lam * np.sum(np.abs(z)))


def lipschitz(D: FilterBank, shape, **kw) -> float:
    """Lipschitz constant ``||D Δ_s||²`` of the data-term gradient."""
    return spectral_norm(D, shape, **kw) ** 2


def ista(y, D: FilterBank, cfg: LassoConfig, z0=None) -> IstaResult:
    """Solve ``min_z 0.5 ||D z - y||² + lam ||z||_1`` by iterative soft-thresholding.

    Starts from ``z0`` (zeros by default) and stops when
    ``||z_new - z|| <= tol * max(||z_new||, tiny)`` or after ``max_iters``.
    """
    y = np.asarray(y)
    h, w = y.shape[-2:]
    if cfg.step_size is None:
        L = lipschitz(D, (h, w), iters=500, tol=1e-10)
        steps = [1.0 / L if L > 0 else 1.0]
    else:
        steps = list(np.atleast_1d(cfg.step_size).astype(float))
    step_ok = True
    if cfg.step_size is not None:
        L = lipschitz(D, (h, w), iters=200, tol=1e-8)
        if max(steps) * L > 1.0 + 1e-6:
            step_ok = False
            warnings.warn(
                f"ISTA step size {max(steps):.3g} exceeds 1/L = {1 / L:.3g}; descent is not guaranteed",
                RuntimeWarning,
                stacklevel=2,
            )

    res = _ista_loop(y, D, cfg, steps, z0)
    res.step_size_ok = step_ok
    return res


def _ista_loop(y, D: FilterBank, cfg: LassoConfig, steps, z0=None) -> IstaResult:
    h, w = y.shape[-2:]
    hs, ws = coeff_shape(h, w, D.stride)
    z = np.zeros(y.shape[:-2] + (D.num_filters, hs, ws), dtype=np.result_type(y, D.weights)) if z0 is None else np.array(z0)
    history = [lasso_objective(z, y, D, cfg.lam)]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        eta = steps[min(it - 1, len(steps) - 1)]
        grad = conv_analysis(conv_synthesis(z, D, (h, w)) - y, D)
        z_new = soft_threshold(z - eta * grad, np.full(D.num_filters, eta * cfg.lam))
        if not np.all(np.isfinite(z_new)):
            raise NumericError(f"ISTA produced non-finite coefficients at iteration {it}", where=it)
        change = np.linalg.norm(z_new - z)
        scale = max(np.linalg.norm(z_new), np.finfo(float).tiny)
        z = z_new
        history.append(lasso_objective(z, y, D, cfg.lam))
        if change <= cfg.tol * scale:
            converged = True
            break
    return IstaResult(z=z, objective=history, iterations=it, converged=converged)


@dataclass
class DictLearnResult:
    D: FilterBank
    objective: list
    codes: list


def dictionary_lipschitz(codes, shapes, filter_size, stride, iters=100, tol=1e-6, seed=0) -> float:
    """Curvature bound for the filter update: largest eigenvalue of ``G ↦ Σ_i ∇_D ½||G z_i||²``.

    Computed by power iteration on the (linear, self-adjoint) map.
    """
    m = codes[0].shape[-3]
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((m, filter_size, filter_size))
    g /= np.linalg.norm(g)
    lam = 0.0
    for _ in range(iters):
        bank = FilterBank(g, stride)
        hg = sum(conv_filter_grad(conv_synthesis(z, bank, shp), z, filter_size, stride) for z, shp in zip(codes, shapes))
        new = float(np.linalg.norm(hg))
        if new == 0.0:
            return 0.0
        g = hg / new
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    return lam


def dict_learn(
    dataset,
    cfg: LassoConfig,
    outer_iters: int,
    dict_lr: float | None = None,
    seed: int = 0,
    num_filters: int = 8,
    filter_size: int = 7,
    stride: int = 1,
    init: FilterBank | None = None,
) -> DictLearnResult:
    """Alternate ISTA sparse coding and one projected-gradient filter step.

    Codes are warm-started from the previous outer iteration, so with
    ``dict_lr`` at or below the inverse curvature bound the recorded
    objective never increases.  ``dict_lr=None`` uses that bound, recomputed
    every outer iteration.
    """
    images = [np.asarray(im, dtype=np.float64) for im in dataset]
    if not images:
        raise ContractError("dataset must not be empty")
    if outer_iters < 0:
        raise ContractError("outer_iters must be >= 0")
    if init is None:
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((num_filters, filter_size, filter_size))
        w /= np.sqrt(np.sum(w ** 2, axis=(1, 2)))[:, None, None]
        D = FilterBank(w, stride)
    else:
        D = FilterBank(np.array(init.weights, dtype=np.float64), init.stride)
    p, s = D.filter_size, D.stride
    # images of equal size are coded together as one batch; the iterates are
    # the same as coding them one by one, only the stopping test is shared
    groups = {}
    for i, im in enumerate(images):
        groups.setdefault(im.shape, []).append(i)
    stacks = [np.stack([images[i] for i in idx]) for idx in groups.values()]
    codes = [None] * len(stacks)
    objective = []
    for t in range(outer_iters):
        for g, y in enumerate(stacks):
            if cfg.step_size is not None:
                codes[g] = ista(y, D, cfg, z0=codes[g]).z
            else:
                # a slight underestimate of L is harmless: descent holds up to 2/L
                L = lipschitz(D, y.shape[-2:], iters=100, tol=1e-6)
                codes[g] = _ista_loop(y, D, cfg, [1.0 / L if L > 0 else 1.0], z0=codes[g]).z
        lr = dict_lr
        if lr is None:
            curv = dictionary_lipschitz(codes, [y.shape[-2:] for y in stacks], p, s, seed=seed)
            lr = 1.0 / curv if curv > 0 else 0.0
        grad = sum(
            conv_filter_grad(conv_synthesis(z, D, y.shape[-2:]) - y, z, p, s) for z, y in zip(codes, stacks)
        )
        D = FilterBank(project_unit_ball(D.weights - lr * grad), s)
        obj = sum(lasso_objective(z, y, D, cfg.lam) for z, y in zip(codes, stacks))
        if not np.isfinite(obj):
            raise NumericError(f"dictionary learning objective diverged at outer iteration {t}", where=t)
        objective.append(obj)
    per_image = [None] * len(images)
    if outer_iters > 0:
        for idx, z in zip(groups.values(), codes):
            for j, i in enumerate(idx):
                per_image[i] = z[j]
    return DictLearnResult(D=D, objective=objective, codes=per_image)
