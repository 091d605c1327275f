"""Binary checkpoint container.

Layout (all integers little-endian ``uint32``)::

    b"CDLNETCK"                 magic, 8 bytes
    version
    manifest length, manifest   UTF-8, one line per tensor: name<TAB>f4|f8<TAB>d0,d1,...
    tensor payloads             raw little-endian row-major, in manifest order
    config length, config       UTF-8 ``key=value`` lines

Floats in the config block are written with ``repr`` so they round-trip
exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import fields

import numpy as np

from .errors import CDLError
from .model import ModelConfig, ModelParams
from .training import Checkpoint, OptimizerState, TrainConfig

MAGIC = b"CDLNETCK"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(CDLError):
    """Unreadable, corrupt or version-mismatched checkpoint file."""


def _tensors(ck: Checkpoint):
    out = []
    for name, arr in ck.params.arrays().items():
        out.append((f"params.{name}", arr))
    for name, arr in ck.opt_state.m.items():
        out.append((f"adam.m.{name}", arr))
    for name, arr in ck.opt_state.v.items():
        out.append((f"adam.v.{name}", arr))
    return out


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(float(v)) for v in value)
    return str(value)


def config_lines(prefix, cfg):
    return [f"{prefix}.{f.name}={_fmt(getattr(cfg, f.name))}" for f in fields(cfg)]


def save_checkpoint(ck: Checkpoint, path):
    """Write ``ck`` to ``path`` atomically (write to a temp file, then rename)."""
    manifest, payloads = [], []
    for name, arr in _tensors(ck):
        arr = np.asarray(arr)
        code = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        manifest.append(f"{name}\t{code}\t{','.join(str(d) for d in arr.shape)}")
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    kv = [
        f"state.epoch={ck.epoch}",
        f"state.best_val_loss={_fmt(float(ck.best_val_loss))}",
        f"adam.step={ck.opt_state.step}",
        f"adam.lr={_fmt(float(ck.opt_state.lr))}",
        f"params.stride={ck.params.stride}",
        f"params.adaptive={_fmt(bool(ck.params.adaptive))}",
    ]
    kv += config_lines("model", ck.model_cfg) + config_lines("train", ck.train_cfg)
    man = "\n".join(manifest).encode("utf-8")
    cfg = "\n".join(kv).encode("utf-8")
    blob = b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(man)), man, *payloads,
                     struct.pack("<I", len(cfg)), cfg])
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _parse_value(text, typ):
    if typ is bool:
        return text == "true"
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is tuple:
        return tuple(float(v) for v in text.split(","))
    return text


def _build(cls, kv, prefix):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in kv:
            raise CheckpointError(f"checkpoint is missing {key}")
        default = f.default
        kwargs[f.name] = _parse_value(kv[key], type(default))
    return cls(**kwargs)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
        (n,) = struct.unpack_from("<I", data, 12)
        pos = 16
        manifest = data[pos:pos + n].decode("utf-8").splitlines()
        pos += n
        tensors = {}
        for line in manifest:
            name, code, dims = line.split("\t")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            dt = _DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape)
            tensors[name] = arr.astype(dt.newbyteorder("="))
            pos += size
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        kv = dict(line.split("=", 1) for line in data[pos:pos + n].decode("utf-8").splitlines())
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    try:
        return _assemble(tensors, kv)
    except KeyError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: missing entry {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


def _assemble(tensors, kv) -> Checkpoint:
    names = ModelParams.NAMES
    params = ModelParams(
        **{k: tensors[f"params.{k}"] for k in names},
        stride=int(kv["params.stride"]),
        adaptive=kv["params.adaptive"] == "true",
    )
    state = OptimizerState(
        m={k: tensors[f"adam.m.{k}"] for k in names},
        v={k: tensors[f"adam.v.{k}"] for k in names},
        step=int(kv["adam.step"]),
        lr=float(kv["adam.lr"]),
    )
    return Checkpoint(
        params=params.validate(),
        opt_state=state,
        epoch=int(kv["state.epoch"]),
        best_val_loss=float(kv["state.best_val_loss"]),
        model_cfg=_build(ModelConfig, kv, "model"),
        train_cfg=_build(TrainConfig, kv, "train"),
    )
