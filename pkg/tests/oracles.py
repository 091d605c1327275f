"""Independent reference computations used by the tests.

Nothing here calls the im2col/scatter code paths under test; dense operators
are assembled straight from the index definition of strided "same"
correlation.
"""

import itertools

import numpy as np


def dense_analysis_matrix(weights, stride, shape):
    """Matrix of x -> conv_analysis(x) with rows ordered (j, u, v), columns (h, w)."""
    weights = np.asarray(weights, dtype=np.float64)
    m, p, _ = weights.shape
    lo = (p - 1) // 2
    h, w = shape
    hs, ws = -(-h // stride), -(-w // stride)
    A = np.zeros((m * hs * ws, h * w))
    for j in range(m):
        for u in range(hs):
            for v in range(ws):
                row = (j * hs + u) * ws + v
                for a in range(p):
                    for b in range(p):
                        r, c = stride * u + a - lo, stride * v + b - lo
                        if 0 <= r < h and 0 <= c < w:
                            A[row, r * w + c] += weights[j, a, b]
    return A


def dense_synthesis_matrix(weights, stride, shape):
    return dense_analysis_matrix(weights, stride, shape).T


def prox_l1_scalar(a, tau):
    """argmin_v 0.5 (v - a)^2 + tau |v| by bounded scalar minimisation."""
    from scipy.optimize import minimize_scalar

    lo, hi = min(a, 0.0) - 1.0, max(a, 0.0) + 1.0
    res = minimize_scalar(lambda v: 0.5 * (v - a) ** 2 + tau * abs(v), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12})
    return res.x


def nearest_in_unit_ball(d):
    """Euclidean projection onto {v : ||v|| <= 1} by constrained minimisation (SLSQP)."""
    from scipy.optimize import minimize

    d = np.ravel(np.asarray(d, dtype=np.float64))
    x0 = np.zeros_like(d)
    res = minimize(lambda v: 0.5 * np.sum((v - d) ** 2), x0, jac=lambda v: v - d,
                   constraints=[{"type": "ineq", "fun": lambda v: 1.0 - v @ v, "jac": lambda v: -2 * v}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def lasso_brute_force(D, y, lam):
    """Global LASSO minimum by enumerating every support and sign pattern.

    For each (support, signs) the stationarity condition restricted to the
    support is a linear system; candidates whose solution reproduces the
    assumed signs are feasible and the smallest objective among them is the
    optimum.  Cost is 3^n solves, so keep n small.
    """
    D = np.asarray(D, dtype=np.float64)
    y = np.ravel(y)
    n = D.shape[1]

    def f(z):
        r = D @ z - y
        return 0.5 * r @ r + lam * np.sum(np.abs(z))

    best_z, best = np.zeros(n), f(np.zeros(n))
    for k in range(1, n + 1):
        # every sign pattern of length k as the columns of a (k, 2^k) matrix
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=k))).T
        for S in itertools.combinations(range(n), k):
            S = list(S)
            DS = D[:, S]
            G = DS.T @ DS
            if np.linalg.matrix_rank(G) < k:
                continue
            Ginv = np.linalg.inv(G)
            Z = (Ginv @ (DS.T @ y))[:, None] - lam * (Ginv @ signs)
            ok = np.all(np.sign(Z) == signs, axis=0)
            for col in np.flatnonzero(ok):
                z = np.zeros(n)
                z[S] = Z[:, col]
                val = f(z)
                if val < best:
                    best, best_z = val, z
    return best_z, best


def soft_threshold_ref(v, tau):
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def ista_dense(D, y, lam, eta, iters):
    """Plain matrix ISTA, used to cross-check the convolutional solver."""
    z = np.zeros(D.shape[1])
    for _ in range(iters):
        z = soft_threshold_ref(z - eta * D.T @ (D @ z - y), eta * lam)
    return z


def thresholds_with_margin(params, y, sigma=None, rng=None, margin_quantile=0.5):
    """Choose each layer's thresholds inside a wide gap of the |pre-activation| values.

    Finite differences are only meaningful away from the soft-threshold kink.
    Working layer by layer, pick per-channel thresholds (or, for adaptive
    models, gains) that maximise the distance to every |u| value seen across
    the batch, searching candidates around the median magnitude.  Modifies
    ``params.thresholds`` in place and returns the smallest margin achieved.
    """
    from cdlnet.model import forward

    K = params.K
    worst = np.inf
    sig = None if sigma is None else np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    for k in range(K):
        params.thresholds[k:] = 0.0
        sub = params.replace(A=params.A[:k + 1], B=params.B[:k + 1], thresholds=params.thresholds[:k + 1])
        _, _, tr = forward(y, sub, sigma, trace=True)
        u = np.abs(tr.pre[k])                        # (..., M, Hs, Ws)
        u = u.reshape((-1,) + u.shape[-3:])          # (N, M, Hs, Ws)
        for j in range(params.M):
            vals = u[:, j].reshape(u.shape[0], -1)
            if sig is None:
                scale = np.ones(u.shape[0])
            else:
                scale = sig if sig.size == u.shape[0] else np.repeat(sig, u.shape[0])
            target = np.quantile(vals / scale[:, None], margin_quantile)
            cands = np.linspace(0.3 * target, 1.7 * target, 4001)
            # distance from cand * scale_n to the nearest |u| of sample n
            mgn = np.full(cands.shape, np.inf)
            for v, sc in zip(vals, scale):
                sv = np.concatenate(([-np.inf], np.sort(v), [np.inf]))
                t = cands * sc
                i = np.searchsorted(sv, t)
                mgn = np.minimum(mgn, np.minimum(sv[i] - t, t - sv[i - 1]))
            best = int(np.argmax(mgn))
            best_c, best_m = cands[best], mgn[best]
            params.thresholds[k, j] = best_c
            worst = min(worst, best_m)
    return worst
