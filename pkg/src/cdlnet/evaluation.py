"""Inference pipeline, PSNR and benchmark reports."""

from __future__ import annotations

import csv
import io
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import ModelParams, forward
from .noise_est import Method, estimate_mad, estimate_pca


def psnr(x, x_hat) -> float:
    """Peak signal-to-noise ratio in dB for images scaled to ``[0, 1]``; ``inf`` when identical."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def parse_sigma(flag):
    """Normalise a ``--sigma`` value: ``None``, ``"auto-mad"``, ``"auto-pca"`` or a float in 0-255 units."""
    if flag is None or flag == "none":
        return None
    if isinstance(flag, str):
        if flag in ("auto-mad", "auto-pca"):
            return flag
        try:
            return float(flag)
        except ValueError:
            raise ContractError(f"invalid sigma {flag!r}: use auto-mad, auto-pca, none or a number") from None
    return float(flag)


def resolve_sigma(y, flag, estimator_cfg=None):
    """Noise level (``[0, 1]`` units) for a sigma flag, or ``None``."""
    flag = parse_sigma(flag)
    if flag is None:
        return None
    if flag == "auto-mad":
        return estimate_mad(y)
    if flag == "auto-pca":
        return estimate_pca(y, estimator_cfg)
    if flag < 0:
        raise ContractError("sigma must be >= 0")
    return flag / 255.0


def denoise(y, params: ModelParams, sigma=None, estimator_cfg=None):
    """Denoise a ``[0, 1]`` image; returns ``(x_hat, sigma_used)``.

    ``sigma`` is a flag accepted by :func:`parse_sigma`.  The image is
    reflect-padded to a multiple of the stride, its mean removed before the
    network and restored after, and the output cropped back.  No clamping is
    applied here.
    """
    y = np.asarray(y, dtype=np.float64)
    sigma_used = resolve_sigma(y, sigma, estimator_cfg)
    if params.adaptive and sigma_used is None:
        raise ContractError("this model has noise-adaptive thresholds; give --sigma (a number, auto-mad or auto-pca)")
    h, w = y.shape
    s = params.stride
    ph, pw = (-h) % s, (-w) % s
    yp = np.pad(y, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else y
    mu = float(yp.mean())
    x_hat, _ = forward((yp - mu).astype(params.dtype), params, sigma_used if params.adaptive else None)
    return x_hat.astype(np.float64)[:h, :w] + mu, sigma_used


def noise_rng(seed: int, name: str, sigma: float):
    """Generator keyed on (seed, image, sigma) so noise does not depend on evaluation order."""
    key = [int(seed), zlib.crc32(name.encode("utf-8")), int(round(sigma * 1000))]
    return np.random.default_rng(np.random.SeedSequence(key))


def add_noise(x, sigma255, seed, name):
    return x + sigma255 / 255.0 * noise_rng(seed, name, sigma255).standard_normal(x.shape)


@dataclass
class EvalReport:
    model_id: str
    estimator: str
    records: list = field(default_factory=list)

    FIELDS = ("model", "image", "sigma", "estimator", "sigma_est", "psnr_noisy", "psnr")

    def sigmas(self):
        return sorted({r["sigma"] for r in self.records})

    def mean_psnr(self, sigma=None) -> float:
        vals = [r["psnr"] for r in self.records if sigma is None or r["sigma"] == sigma]
        return float(sum(vals) / len(vals))

    def mean_noisy_psnr(self, sigma=None) -> float:
        vals = [r["psnr_noisy"] for r in self.records if sigma is None or r["sigma"] == sigma]
        return float(sum(vals) / len(vals))

    def to_csv(self, timing=False) -> str:
        cols = list(self.FIELDS) + (["ms"] if timing else [])
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for r in self.records:
            row = []
            for c in cols:
                v = r[c]
                row.append(repr(v) if isinstance(v, float) else v)
            wr.writerow(row)
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"model {self.model_id}  estimator {self.estimator}",
                 f"{'sigma':>6} {'noisy':>8} {'denoised':>9} {'ms/img':>8}"]
        for s in self.sigmas():
            rs = [r for r in self.records if r["sigma"] == s]
            ms = sum(r["ms"] for r in rs) / len(rs)
            lines.append(f"{s:6.1f} {self.mean_noisy_psnr(s):8.2f} {self.mean_psnr(s):9.2f} {ms:8.1f}")
        return "\n".join(lines)


def evaluate(params: ModelParams, images, sigma_list, estimator="gt", seed=0, model_id="model",
             estimator_cfg=None) -> EvalReport:
    """Add seeded noise to every ``(name, image)`` pair at each sigma and denoise it.

    ``images`` holds ``[0, 1]`` float images; ``sigma_list`` is in 0-255
    units.  ``estimator`` is ``gt``, ``mad``, ``pca`` or ``none`` (the last
    only for non-adaptive models).
    """
    images = list(images)
    if not images:
        raise ContractError("evaluation set is empty")
    method = str(estimator.value if isinstance(estimator, Method) else estimator)
    report = EvalReport(model_id=model_id, estimator=method)
    for sigma in sigma_list:
        sigma = float(sigma)
        for name, x in images:
            y = add_noise(x, sigma, seed, name)
            flag = {"gt": sigma, "mad": "auto-mad", "pca": "auto-pca", "none": None}.get(method, "bad")
            if flag == "bad":
                raise ContractError(f"unknown estimator {method!r}")
            t0 = time.perf_counter()
            x_hat, used = denoise(y, params, flag, estimator_cfg)
            ms = 1000.0 * (time.perf_counter() - t0)
            report.records.append({
                "model": model_id,
                "image": name,
                "sigma": sigma,
                "estimator": method,
                "sigma_est": float("nan") if used is None else float(used * 255.0),
                "psnr_noisy": psnr(x, y),
                "psnr": psnr(x, x_hat),
                "ms": ms,
            })
    return report
