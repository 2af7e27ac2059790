"""Binary checkpoints: named tensors + config + optimizer + rng state.

Layout (little-endian): magic ``XFC1``, u32 format version, a u32
length-prefixed JSON metadata blob (config, step counter, rng state), a u32
entry count, then per entry a length-prefixed name, dtype code, shape, and
u64 byte offset into the raw buffer section that follows. Save -> load is
bitwise exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import RunConfig, config_from_json, config_to_json
from .optim import AdamState
from .tensor import Tensor

CHECKPOINT_MAGIC = b"XFC1"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _entries_from(params: dict[str, Tensor], adam: AdamState | None) -> dict[str, np.ndarray]:
    entries = {name: t.data for name, t in params.items()}
    if adam is not None:
        for name, arr in adam.m.items():
            entries[f"adam.m/{name}"] = arr
        for name, arr in adam.v.items():
            entries[f"adam.v/{name}"] = arr
    return entries


def save_checkpoint(path: str, params: dict[str, Tensor], config: RunConfig,
                    adam: AdamState | None = None, step: int = 0,
                    rng_state: dict | None = None) -> None:
    entries = _entries_from(params, adam)
    meta = {
        "config": json.loads(config_to_json(config)),
        "step": step,
        "rng_state": rng_state,
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step": adam.step,
        },
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(entries)))
        offset = 0
        payloads = []
        for name, arr in entries.items():
            a = np.ascontiguousarray(arr)
            code = _DTYPE_CODES[np.dtype(a.dtype.str.replace(">", "<"))]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", code))
            fh.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                fh.write(struct.pack("<I", d))
            fh.write(struct.pack("<Q", offset))
            payload = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
            payloads.append(payload)
            offset += len(payload)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path: str) -> dict:
    """Returns {config, step, rng_state, adam_meta, arrays: name -> ndarray}."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta_len = struct.unpack("<I", fh.read(4))[0]
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        count = struct.unpack("<I", fh.read(4))[0]
        specs = []
        for _ in range(count):
            name_len = struct.unpack("<H", fh.read(2))[0]
            name = fh.read(name_len).decode("utf-8")
            code = struct.unpack("<B", fh.read(1))[0]
            ndim = struct.unpack("<B", fh.read(1))[0]
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            offset = struct.unpack("<Q", fh.read(8))[0]
            specs.append((name, code, shape, offset))
        data = fh.read()
    arrays = {}
    for name, code, shape, offset in specs:
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype=dt, count=n, offset=offset).reshape(shape).copy()
    config = config_from_json(json.dumps(meta["config"]))
    return {
        "config": config,
        "step": meta["step"],
        "rng_state": meta["rng_state"],
        "adam_meta": meta["adam"],
        "arrays": arrays,
    }


def restore_model_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing registry (shapes must match)."""
    for name, t in params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        a = arrays[name]
        if a.shape != t.data.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape {a.shape}, expected {t.data.shape}")
        t.data = a.astype(t.data.dtype, copy=True)


def restore_adam(adam: AdamState, meta: dict | None, arrays: dict[str, np.ndarray]) -> None:
    if meta is not None:
        adam.lr = meta["lr"]
        adam.beta1 = meta["beta1"]
        adam.beta2 = meta["beta2"]
        adam.eps = meta["eps"]
        adam.step = meta["step"]
    adam.m = {k[len("adam.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
    adam.v = {k[len("adam.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}
