"""Binary checkpoint files.

Layout (little-endian)::

    b"URM1" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 dtype code | u8 rank
                | rank x u32 dims | payload

Parameters are stored as ``param/<name>``, optimizer state as
``optim/<key>``, and the config echo and step counter as ``meta/config``
(utf-8 bytes) and ``meta/step``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import config as config_mod
from .model import URM, build_model
from .training import Optimizer

MAGIC = b"URM1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


def _code(arr: np.ndarray) -> int:
    for code, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(
                f"truncated {what}: expected {n} bytes, only {len(buf) - pos} remain (file is {len(buf)} bytes)", pos
            )
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        at = pos
        try:
            name = take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid utf-8", at) from None
        at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}", at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(size * dt.itemsize, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes", pos)
    return out


def save_checkpoint(path, model: URM, cfg, optimizer: Optimizer | None = None, step: int = 0) -> None:
    tensors = {
        "meta/config": np.frombuffer(config_mod.dumps(cfg).encode("utf-8"), dtype=np.uint8),
        "meta/step": np.array([step], dtype=np.int64),
    }
    for name, p in model.named_parameters().items():
        tensors[f"param/{name}"] = p.data
    if optimizer is not None:
        for key, arr in optimizer.state_arrays().items():
            tensors[f"optim/{key}"] = arr
    write_tensors(path, tensors)


def model_from_config(cfg) -> URM:
    return build_model(
        cfg.model,
        cfg.data.num_vertices,
        cfg.data.feature_dim,
        cfg.data.verbs,
        cfg.data.nouns,
        cfg.num_actions,
        seed=cfg.run.seed,
    )


def load_params(model: URM, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``param/*`` arrays into ``model``; any name or shape mismatch is an error."""
    params = model.named_parameters()
    stored = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = stored[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model shape {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


def load_checkpoint(path):
    """Return ``(config, model, tensors, step)``; the model is rebuilt from the config echo."""
    tensors = read_tensors(path)
    if "meta/config" not in tensors:
        raise CheckpointError("checkpoint has no meta/config record")
    cfg = config_mod.loads(tensors["meta/config"].tobytes().decode("utf-8"))
    model = model_from_config(cfg)
    load_params(model, tensors)
    step = int(tensors.get("meta/step", np.zeros(1, np.int64))[0])
    return cfg, model, tensors, step


def optimizer_arrays(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len("optim/") :]: v for k, v in tensors.items() if k.startswith("optim/")}
