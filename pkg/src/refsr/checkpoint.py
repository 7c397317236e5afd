"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian array payload. The header records every array's
name, shape, dtype and offset plus the full model configuration, gate values,
optimizer scalars and RNG state. Loading verifies every name and shape.

Files are written to ``<path>.partial`` and atomically renamed, so a partial
checkpoint never occupies the final path.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

MAGIC = b"RSRCKPT1"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    version: int
    model_config: dict
    arrays: dict[str, np.ndarray]
    lambdas: dict[str, float]
    optimizer: dict | None
    rng_state: dict | None
    step: int | None
    extra: dict


def _payload_entries(model, optimizer=None):
    """(name, array) pairs in a deterministic order."""
    entries = []
    for name, p in model.reg.params.items():
        entries.append((f"param:{name}", p.data))
        if p.spectral_state is not None:
            u, v = p.spectral_state
            entries.append((f"spectral_u:{name}", u))
            entries.append((f"spectral_v:{name}", v))
    if optimizer is not None:
        for name, m in optimizer.m.items():
            entries.append((f"optim_m:{name}", m))
        for name, v in optimizer.v.items():
            entries.append((f"optim_v:{name}", v))
    return entries


def save_checkpoint(path: str, model, optimizer=None, rng: np.random.Generator | None = None,
                    step: int | None = None, extra: dict | None = None) -> str:
    entries = _payload_entries(model, optimizer)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in entries:
        dtype = "float32" if arr.dtype == np.float32 else "float64"
        raw = arr.astype(_DTYPES[dtype]).tobytes()  # astype copies C-contiguously, 0-d kept
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "version": VERSION,
        "model_config": dataclasses.asdict(model.cfg),
        "lambdas": model.lambda_values(),
        "arrays": manifest,
        "optimizer": None if optimizer is None else {"t": optimizer.t, "beta1": optimizer.beta1,
                                                     "beta2": optimizer.beta2, "eps": optimizer.eps},
        "rng_state": None if rng is None else rng.bit_generator.state,
        "step": step,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    partial = path + ".partial"
    with open(partial, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(header_bytes)).tobytes())
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(partial, path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_len = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    if header["version"] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    arrays = {}
    for ent in header["arrays"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).astype(ent["dtype"]).copy()
    return Checkpoint(
        version=header["version"],
        model_config=header["model_config"],
        arrays=arrays,
        lambdas=header["lambdas"],
        optimizer=header["optimizer"],
        rng_state=header["rng_state"],
        step=header["step"],
        extra=header.get("extra", {}),
    )


def restore_model(model, ckpt: Checkpoint):
    """Copy checkpoint arrays into the model, verifying names and shapes."""
    stored = {n[len("param:"):]: a for n, a in ckpt.arrays.items() if n.startswith("param:")}
    missing = sorted(set(model.reg.params) - set(stored))
    extra = sorted(set(stored) - set(model.reg.params))
    if missing or extra:
        raise ValueError(f"checkpoint/model parameter mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, p in model.reg.params.items():
        arr = stored[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)  # astype copies contiguously, 0-d kept
        u_key, v_key = f"spectral_u:{name}", f"spectral_v:{name}"
        if u_key in ckpt.arrays:
            p.spectral_state = (ckpt.arrays[u_key].copy(), ckpt.arrays[v_key].copy())
    return model


def build_model_from_checkpoint(ckpt: Checkpoint):
    from .model import ModelConfig, RefSRModel

    cfg = ModelConfig(**ckpt.model_config)
    model = RefSRModel(cfg, seed=0)
    return restore_model(model, ckpt)
