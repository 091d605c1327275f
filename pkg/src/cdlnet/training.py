"""Gradients, projected Adam, data sampling and the training loop."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from .errors import CDLError, ContractError, NumericError
from .model import ModelConfig, ModelParams, forward, init_params, project_params
from .tensor_core import conv_analysis, conv_filter_grad, conv_synthesis

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.  ``sigma_range`` is in 0-255 pixel units."""

    sigma_range: tuple = (25.0, 25.0)
    batch_size: int = 10
    crop_size: int = 128
    lr0: float = 1e-3
    lr_decay: float = 0.95
    decay_every: int = 50
    max_epochs: int = 6000
    backtrack_factor: float = 0.8
    seed: int = 0
    checkpoint_every: int = 10
    val_every: int = 5
    patience: int = 100
    min_rel_improvement: float = 1e-5
    divergence_factor: float = 5.0
    check_feasibility: bool = False

    def __post_init__(self):
        lo, hi = (float(v) for v in self.sigma_range)
        object.__setattr__(self, "sigma_range", (lo, hi))
        if not 0 <= lo <= hi:
            raise ContractError(f"sigma_range must satisfy 0 <= lo <= hi, got {self.sigma_range}")
        if not 0 < self.lr_decay < 1 or not 0 < self.backtrack_factor < 1:
            raise ContractError("lr_decay and backtrack_factor must lie in (0, 1)")
        for name in ("batch_size", "crop_size", "decay_every", "checkpoint_every", "val_every", "patience"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.lr0 <= 0:
            raise ContractError("lr0 must be > 0")
        if self.max_epochs < 0:
            raise ContractError("max_epochs must be >= 0")

    @property
    def sigma_mid(self) -> float:
        """Midpoint of the noise range in [0, 1] image units."""
        return 0.5 * (self.sigma_range[0] + self.sigma_range[1]) / 255.0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3

    @classmethod
    def fresh(cls, params: ModelParams, lr: float):
        arrays = params.arrays()
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
            step=0,
            lr=lr,
        )

    def copy(self):
        return OptimizerState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
            lr=self.lr,
        )


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: OptimizerState
    epoch: int
    best_val_loss: float
    model_cfg: ModelConfig
    train_cfg: TrainConfig

    def copy(self):
        return Checkpoint(self.params.copy(), self.opt_state.copy(), self.epoch, self.best_val_loss, self.model_cfg, self.train_cfg)


class TrainingDiverged(CDLError):
    """Raised after repeated backtracking fails; carries the last good checkpoint."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def loss(x, x_hat) -> float:
    """Squared error summed over pixels, averaged over the batch."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    n = int(np.prod(x.shape[:-2])) if x.ndim > 2 else 1
    d = x_hat.astype(np.float64) - x
    return float(np.sum(d * d) / n)


def backward(params: ModelParams, y, x, sigma_n=None):
    """Loss and its gradient with respect to every parameter.

    Runs the network forward while recording intermediates, then walks the
    layers in reverse.  Returns ``(loss_value, grads)`` where ``grads`` is a
    :class:`ModelParams` of the same shapes.  For adaptive models the
    threshold gradient is taken with respect to the stored gains.
    """
    y = np.asarray(y)
    x = np.asarray(x)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {y.shape}")
    x_hat, z_final, tr = forward(y, params, sigma_n, trace=True)
    n = int(np.prod(y.shape[:-2])) if y.ndim > 2 else 1
    diff = x_hat - x
    value = float(np.sum(diff.astype(np.float64) ** 2) / n)
    gx = (2.0 / n) * diff

    p, s = params.filter_size, params.stride
    h, w = y.shape[-2:]
    grads = params.zeros_like()
    grads.D[...] = conv_filter_grad(gx, z_final, p, s)
    gz = conv_analysis(gx, params.dictionary())
    sigma = None if tr.sigma is None else np.asarray(tr.sigma, dtype=params.dtype)
    for k in range(params.K - 1, -1, -1):
        # ST is active exactly where its output is non-zero (|u| > tau);
        # there d/du = 1 and d/dtau = -sign(u) = -sign(z)
        z_next = tr.z[k + 1]
        gu = gz * (z_next != 0)
        gtau = -np.sum(np.sign(z_next) * gu, axis=(-2, -1))
        if params.adaptive:
            if sigma.ndim == 0:
                gthr = sigma * gtau
            else:
                gthr = sigma.reshape(sigma.shape + (1,) * (gtau.ndim - sigma.ndim)) * gtau
        else:
            gthr = gtau
        grads.thresholds[k] = gthr.reshape(-1, params.M).sum(axis=0)

        gc = -gu
        grads.A[k] = conv_filter_grad(tr.residual[k], gc, p, s)
        if k == 0:
            break
        gr = conv_synthesis(gc, params.analysis_bank(k), (h, w))
        grads.B[k] = conv_filter_grad(gr, tr.z[k], p, s)
        gz = gu + conv_analysis(gr, params.synthesis_bank(k))

    for name, g in grads.arrays().items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}", where=name)
    return value, grads


def project_constraints(params: ModelParams) -> ModelParams:
    """Project every filter onto the unit ball and clamp thresholds at zero."""
    return project_params(params)


def is_feasible(params: ModelParams, atol=0.0) -> bool:
    ok = np.all(params.thresholds >= 0)
    for name in ("A", "B", "D"):
        w = getattr(params, name).astype(np.float64)
        ok = ok and np.all(np.sum(w * w, axis=(-2, -1)) <= 1.0 + atol)
    return bool(ok)


def adam_step(params: ModelParams, grads: ModelParams, state: OptimizerState, lr=None,
              betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update followed by the constraint projection."""
    lr = state.lr if lr is None else lr
    b1, b2 = betas
    t = state.step + 1
    new = {}
    m_new, v_new = {}, {}
    for name, p in params.arrays().items():
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        m_new[name] = m.astype(p.dtype)
        v_new[name] = v.astype(p.dtype)
    out = project_constraints(params.replace(**new))
    return out, OptimizerState(m=m_new, v=v_new, step=t, lr=state.lr)


@dataclass
class Batch:
    y: np.ndarray      # noisy, mean-subtracted
    x: np.ndarray      # clean, same mean subtracted
    sigma: np.ndarray  # per-sample noise level in [0, 1] units
    mean: np.ndarray   # per-sample mean of the noisy crop


def to_unit(img) -> np.ndarray:
    """8-bit integer images are divided by 255; float images are taken as already in [0, 1]."""
    a = np.asarray(img)
    if a.dtype.kind in "ui":
        return a.astype(np.float64) / 255.0
    return a.astype(np.float64)


def make_batch(images, cfg: TrainConfig, rng, dtype=np.float32) -> Batch:
    """Sample one crop per image with random flips, rotation and AWGN."""
    c = cfg.crop_size
    lo, hi = cfg.sigma_range
    ys, xs, sig, means = [], [], [], []
    for img in images:
        a = to_unit(img)
        h, w = a.shape
        if h < c or w < c:
            raise ContractError(f"image of size {a.shape} is smaller than crop size {c}")
        i = int(rng.integers(0, h - c + 1))
        j = int(rng.integers(0, w - c + 1))
        crop = a[i:i + c, j:j + c]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        if rng.random() < 0.5:
            crop = crop[::-1, :]
        crop = np.rot90(crop, int(rng.integers(0, 4)))
        sigma = rng.uniform(lo, hi) / 255.0 if hi > lo else lo / 255.0
        noisy = crop + sigma * rng.standard_normal(crop.shape)
        mu = noisy.mean()
        ys.append(noisy - mu)
        xs.append(crop - mu)
        sig.append(sigma)
        means.append(mu)
    return Batch(
        y=np.stack(ys).astype(dtype),
        x=np.stack(xs).astype(dtype),
        sigma=np.asarray(sig, dtype=dtype),
        mean=np.asarray(means, dtype=np.float64),
    )


def validation_sigmas(cfg: TrainConfig):
    lo, hi = cfg.sigma_range
    if hi == lo:
        return [lo]
    return [lo, 0.5 * (lo + hi), hi]


def validation_loss(params: ModelParams, val_set, cfg: TrainConfig) -> float:
    """Mean per-pixel squared error over ``val_set`` at fixed noise realisations."""
    if not val_set:
        return math.nan
    total, count = 0.0, 0
    for i, img in enumerate(val_set):
        x = to_unit(img)
        for sigma in validation_sigmas(cfg):
            rng = np.random.default_rng([cfg.seed, 7919, i, int(round(sigma * 1000))])
            y = x + sigma / 255.0 * rng.standard_normal(x.shape)
            mu = y.mean()
            s = sigma / 255.0 if params.adaptive else None
            x_hat, _ = forward((y - mu).astype(params.dtype), params, s)
            total += float(np.mean((x_hat + mu - x) ** 2))
            count += 1
    return total / count


def train(dataset, val_set, mcfg: ModelConfig, tcfg: TrainConfig, *, resume: Checkpoint | None = None,
          checkpoint_path=None, callback=None, fault=None, dtype=np.float32) -> Checkpoint:
    """Train a model and return the checkpoint with the best validation loss.

    ``callback(event)`` receives a dict per epoch and per backtrack.
    ``fault(epoch, step)`` returning True replaces that batch loss with NaN,
    which exercises the divergence handling.  When ``checkpoint_path`` is
    given the best checkpoint is written there whenever it improves and the
    latest periodic checkpoint is written next to it with a ``.last`` suffix.
    """
    from .checkpoint import save_checkpoint

    if not dataset:
        raise ContractError("training dataset must not be empty")
    emit = callback or (lambda event: None)
    if resume is not None:
        params = resume.params.astype(dtype)
        state = resume.opt_state.copy()
        epoch = resume.epoch
        best_val = resume.best_val_loss
    else:
        params = init_params(mcfg, sigma_mid=max(tcfg.sigma_mid, 1e-6), dtype=dtype)
        state = OptimizerState.fresh(params, tcfg.lr0)
        epoch = 0
        best_val = math.inf

    def snapshot():
        return Checkpoint(params.copy(), state.copy(), epoch, best_val, mcfg, tcfg)

    last_good = snapshot()
    best = last_good.copy()
    recent = deque(maxlen=100)
    failures = 0
    val_history = []
    images = list(dataset)

    while epoch < tcfg.max_epochs:
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(len(images))
        epoch_losses = []
        diverged = False
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = make_batch([images[i] for i in order[start:start + tcfg.batch_size]], tcfg, rng, dtype)
            sigma = batch.sigma if params.adaptive else None
            try:
                value, grads = backward(params, batch.y, batch.x, sigma)
            except NumericError:
                value, grads = math.nan, None
            if fault is not None and fault(epoch, step):
                value = math.nan
            if not math.isfinite(value) or (
                len(recent) >= 10 and value > tcfg.divergence_factor * float(np.median(recent))
            ):
                diverged = True
                break
            recent.append(value)
            epoch_losses.append(value)
            params, state = adam_step(params, grads, state)
            if tcfg.check_feasibility:
                assert is_feasible(params), f"infeasible parameters after step {state.step}"

        if diverged:
            failures += 1
            if failures > 3:
                raise TrainingDiverged(
                    f"training diverged {failures - 1} times without progress", last_good.copy()
                )
            restored = last_good.copy()
            params, state = restored.params, restored.opt_state
            state.lr *= tcfg.backtrack_factor
            failed_epoch, epoch = epoch, restored.epoch
            recent.clear()
            log.warning("divergence in epoch %d; restored epoch %d with lr %.3g", failed_epoch, epoch, state.lr)
            emit({"event": "backtrack", "epoch": failed_epoch, "restored_epoch": epoch, "lr": state.lr})
            continue

        epoch += 1
        if epoch % tcfg.decay_every == 0:
            state.lr *= tcfg.lr_decay
        train_loss = float(np.mean(epoch_losses))
        val = math.nan
        if val_set and (epoch % tcfg.val_every == 0 or epoch == tcfg.max_epochs):
            val = validation_loss(params, val_set, tcfg)
            val_history.append((epoch, val))
            if val < best_val:
                best_val = val
                best = snapshot()
                if checkpoint_path is not None:
                    save_checkpoint(best, checkpoint_path)
        elif not val_set and train_loss < best_val:
            best_val = train_loss
            best = snapshot()
        emit({"event": "epoch", "epoch": epoch, "loss": train_loss, "val_loss": val, "lr": state.lr})
        if epoch % tcfg.checkpoint_every == 0 or epoch == tcfg.max_epochs:
            last_good = snapshot()
            failures = 0
            if checkpoint_path is not None:
                save_checkpoint(last_good, str(checkpoint_path) + ".last")
        if _converged(val_history, tcfg):
            log.info("validation loss converged at epoch %d", epoch)
            break

    return best


def _converged(history, cfg: TrainConfig) -> bool:
    """Best validation loss improved by less than ``min_rel_improvement`` over ``patience`` epochs."""
    if not history or history[-1][0] < cfg.patience:
        return False
    last_epoch = history[-1][0]
    old = [v for e, v in history if e <= last_epoch - cfg.patience]
    if not old:
        return False
    before = min(old)
    now = min(v for _, v in history)
    return (before - now) < cfg.min_rel_improvement * abs(before)
