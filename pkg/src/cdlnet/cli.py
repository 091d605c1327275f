"""Command-line interface: ``cdlnet train | denoise | eval | estimate | dump-filters``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .errors import ContractError, NumericError
from .evaluation import denoise, evaluate, parse_sigma
from .imageio import ImageFormatError, list_images, load_image, read_raw, save_image
from .model import ModelConfig, filter_grid
from .noise_est import EstimatorConfig, estimate_mad, estimate_pca
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("cdlnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config files ---------------------------------------------------------

RUN_KEYS = ("data", "val_data", "out")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, default):
    try:
        return _coerce_value(value, default)
    except ValueError:
        raise UsageError(f"cannot parse {value!r} as {type(default).__name__}") from None


def _coerce_value(value: str, default):
    if isinstance(default, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = [float(v) for v in value.replace("[", "").replace("]", "").split(",")]
        return (parts[0], parts[-1])
    return value


def build_configs(kv: dict):
    """Split a flat key-value mapping into ``(ModelConfig, TrainConfig, run options)``.

    Bare keys go to every config that has a field of that name; ``model.`` and
    ``train.`` prefixes target one.  ``preset = small|big`` seeds the model
    fields.
    """
    model_kw, train_kw, run = {}, {}, {}
    preset = kv.get("preset")
    base = {"small": ModelConfig.small(), "big": ModelConfig.big(), None: ModelConfig()}.get(preset)
    if base is None:
        raise UsageError(f"unknown preset {preset!r}")
    model_defaults = base.to_dict()
    train_defaults = TrainConfig().to_dict()
    for key, value in kv.items():
        if key == "preset":
            continue
        scope, _, name = key.rpartition(".")
        matched = False
        if key in RUN_KEYS:
            run[key] = value
            matched = True
        if scope in ("", "model") and name in model_defaults:
            model_kw[name] = _coerce(value, model_defaults[name])
            matched = True
        if scope in ("", "train") and name in train_defaults:
            train_kw[name] = _coerce(value, train_defaults[name])
            matched = True
        if not matched:
            raise UsageError(f"unknown configuration key {key!r}")
    return ModelConfig(**{**model_defaults, **model_kw}), TrainConfig(**{**train_defaults, **train_kw}), run


def _load_dir(directory):
    paths = list_images(directory)
    if not paths:
        raise ImageFormatError(f"{directory}: no .pgm or .png images found")
    return paths


# -- commands -------------------------------------------------------------

def cmd_train(args):
    kv = read_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    mcfg, tcfg, run = build_configs(kv)
    data = args.data or run.get("data")
    out = args.out or run.get("out")
    if not data or not out:
        raise UsageError("training needs a data directory and an output checkpoint path (config keys data, out)")
    dataset = [read_raw(p) for p in _load_dir(data)]
    val_dir = args.val_data or run.get("val_data")
    val_set = [read_raw(p) for p in _load_dir(val_dir)] if val_dir else []
    resume = load_checkpoint(args.resume) if args.resume else None

    def report(ev):
        if ev["event"] == "epoch":
            log.info("epoch %d  loss %.5g  val %.5g  lr %.3g", ev["epoch"], ev["loss"], ev["val_loss"], ev["lr"])
        else:
            log.warning("backtrack at epoch %d -> epoch %d, lr %.3g", ev["epoch"], ev["restored_epoch"], ev["lr"])

    ck = train(dataset, val_set, mcfg, tcfg, resume=resume, checkpoint_path=out, callback=report)
    from .checkpoint import save_checkpoint

    save_checkpoint(ck, out)
    print(f"saved checkpoint from epoch {ck.epoch} (validation loss {ck.best_val_loss:.6g}) to {out}")
    return EXIT_OK


def cmd_denoise(args):
    ck = load_checkpoint(args.ckpt)
    y = load_image(args.inp)
    t0 = time.perf_counter()
    x_hat, sigma = denoise(y, ck.params, parse_sigma(args.sigma))
    ms = 1000 * (time.perf_counter() - t0)
    save_image(args.out, x_hat)
    s = "none" if sigma is None else f"{sigma * 255:.3f}"
    print(f"sigma {s} (0-255 units)  time {ms:.1f} ms  -> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    ck = load_checkpoint(args.ckpt)
    paths = _load_dir(args.data)
    images = [(p.name, load_image(p)) for p in paths]
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sigmas expects comma-separated numbers, got {args.sigmas!r}") from None
    rep = evaluate(ck.params, images, sigmas, estimator=args.estimator, seed=args.seed,
                   model_id=args.model_id or Path(args.ckpt).stem)
    if args.report:
        Path(args.report).write_text(rep.to_csv(timing=args.timing))
    print(rep.table())
    return EXIT_OK


def cmd_estimate(args):
    y = load_image(args.inp)
    if args.method == "mad":
        s = estimate_mad(y)
    else:
        s = estimate_pca(y, EstimatorConfig(method="pca", pca_patch_size=args.patch_size))
    print(f"{s * 255:.4f}")
    return EXIT_OK


def cmd_dump_filters(args):
    ck = load_checkpoint(args.ckpt)
    grid = filter_grid(ck.params.D)
    if args.scale > 1:
        grid = np.kron(grid, np.ones((args.scale, args.scale)))
    save_image(args.out, grid)
    print(f"wrote {ck.params.M} filters to {args.out}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="cdlnet", description="Convolutional dictionary learning denoiser.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--data", help="directory of training images (overrides config)")
    t.add_argument("--val-data", help="directory of validation images (overrides config)")
    t.add_argument("--out", help="output checkpoint path (overrides config)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise one image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--sigma", default="none", help="auto-pca, auto-mad, none, or noise level in 0-255 units")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="benchmark a checkpoint on a directory of clean images")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--sigmas", default="15,25,50")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--estimator", choices=["gt", "pca", "mad", "none"], default="gt")
    e.add_argument("--report", help="write one CSV record per image and sigma")
    e.add_argument("--timing", action="store_true", help="include per-image milliseconds in the CSV")
    e.add_argument("--model-id")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("estimate", help="estimate the noise level of an image")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--method", choices=["mad", "pca"], default="pca")
    s.add_argument("--patch-size", type=int, default=7)
    s.set_defaults(func=cmd_estimate)

    f = sub.add_parser("dump-filters", help="write the dictionary filters as a tiled image")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--scale", type=int, default=4)
    f.set_defaults(func=cmd_dump_filters)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
