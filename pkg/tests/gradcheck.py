"""Finite-difference checking of the reverse-mode gradients."""

import numpy as np

from cdlnet.model import ModelConfig, forward, init_params
from cdlnet.training import backward, loss


def random_params(rng, K=3, M=4, p=7, stride=1, adaptive=False, scale=0.6):
    cfg = ModelConfig(K=K, M=M, filter_size=p, stride=stride, adaptive=adaptive, seed=int(rng.integers(1 << 30)))
    base = init_params(cfg, sigma_mid=0.1, norm_shape=(32, 32), dtype=np.float64)

    def jitter(a):
        return a + scale * np.sqrt(np.mean(a * a)) * rng.standard_normal(a.shape)

    return base.replace(A=jitter(base.A), B=jitter(base.B), D=jitter(base.D))


def loss_at(params, y, x, sigma):
    x_hat, _ = forward(y, params, sigma)
    return loss(x, x_hat)


def check_gradients(params, y, x, sigma, rng, h=1e-5, per_block=6):
    """Central differences against backward for every parameter class and layer."""
    _, g = backward(params, y, x, sigma)
    worst = 0.0
    blocks = [("D", None)] + [(name, k) for name in ("A", "B", "thresholds") for k in range(params.K)]
    for name, k in blocks:
        arr = getattr(params, name) if k is None else getattr(params, name)[k]
        grad = getattr(g, name) if k is None else getattr(g, name)[k]
        flat_idx = rng.choice(arr.size, size=min(per_block, arr.size), replace=False)
        fd, an = [], []
        for idx in flat_idx:
            pos = np.unravel_index(idx, arr.shape)
            old = arr[pos]
            arr[pos] = old + h
            fp = loss_at(params, y, x, sigma)
            arr[pos] = old - h
            fm = loss_at(params, y, x, sigma)
            arr[pos] = old
            fd.append((fp - fm) / (2 * h))
            an.append(grad[pos])
        # directional derivative along a random direction covering the whole block
        d = rng.standard_normal(arr.shape)
        d /= np.linalg.norm(d)
        arr += h * d
        fp = loss_at(params, y, x, sigma)
        arr -= 2 * h * d
        fm = loss_at(params, y, x, sigma)
        arr += h * d
        fd.append((fp - fm) / (2 * h))
        an.append(float(np.sum(grad * d)))
        fd, an = np.asarray(fd), np.asarray(an)
        if name == "B" and k == 0:
            # B_0 acts on z^(0) = 0 and never influences the output
            assert np.all(grad == 0) and np.all(fd == 0)
            continue
        assert np.linalg.norm(an) > 0, f"{name}[{k}] gradient vanished; the check would be vacuous"
        rel = np.linalg.norm(fd - an) / np.linalg.norm(an)
        assert rel <= 1e-4, f"{name}[{k}]: relative error {rel:.2e}"
        worst = max(worst, rel)
    return worst
