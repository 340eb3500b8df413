"""Deterministic checkpoint archive.

Layout: magic line, 8-byte little-endian manifest length, JSON manifest
(parameter names in state-dict order with shapes/dtypes plus the model config
digest), then the concatenated raw array bytes. Writing the same parameters
twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ShapeError

MAGIC = b"SKLVCKPT1\n"


def save_checkpoint(path: str | Path, model, extra: dict | None = None) -> None:
    manifest = {"digest": model.cfg.digest(), "extra": extra or {}, "params": []}
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        manifest["params"].append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
        blobs.append(arr.tobytes())
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for b in blobs:
            f.write(b)


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return (manifest, {name: ndarray})."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint archive")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen))
        arrays = {}
        for p in manifest["params"]:
            count = int(np.prod(p["shape"])) if p["shape"] else 1
            dtype = np.dtype(p["dtype"])
            arrays[p["name"]] = np.frombuffer(
                f.read(count * dtype.itemsize), dtype=dtype
            ).reshape(p["shape"])
    return manifest, arrays


def load_checkpoint(path: str | Path, model, submodule: str | None = None) -> dict:
    """Load parameters into the model, rejecting digest or shape mismatches.

    With ``submodule`` (e.g. ``"keypoint_head"``), only that prefix is loaded.
    Returns the manifest's ``extra`` record.
    """
    manifest, arrays = read_checkpoint(path)
    if manifest["digest"] != model.cfg.digest():
        raise ConfigError(
            f"checkpoint digest {manifest['digest']} does not match "
            f"model config digest {model.cfg.digest()}"
        )
    state = model.state_dict()
    prefix = f"{submodule}." if submodule else ""
    update = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        if name not in state:
            raise ShapeError(f"unknown parameter {name!r} in checkpoint")
        if tuple(state[name].shape) != tuple(arr.shape):
            raise ShapeError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                f"{tuple(state[name].shape)}"
            )
        update[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    if not update:
        raise ConfigError(f"checkpoint holds no parameters under prefix {prefix!r}")
    state.update(update)
    model.load_state_dict(state)
    return manifest["extra"]
