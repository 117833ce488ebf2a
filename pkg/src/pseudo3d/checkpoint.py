"""Checkpoint container.

A checkpoint is a NumPy ``.npz`` archive. Every parameter is stored under its
canonical hierarchical name (``down.0.res.0.conv1.temporal.weight``). One extra
entry, ``__header__``, holds a JSON document:

    {
      "format": "pseudo3d-checkpoint", "version": 1,
      "kind": "unet" | "image_encoder" | "prior",
      "config": {...},                  # constructor arguments
      "shapes": {name: [d0, d1, ...]},  # shape tag of every array
      "temporal_init": {module: flag},  # unet only
      "provenance": {...},              # free-form, e.g. source checksum
      "checksum": "<sha256>"            # see content_checksum
    }

Loading rebuilds the module from ``config`` and refuses the file unless the
names and shapes in the archive, the header and the module agree exactly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

FORMAT = "pseudo3d-checkpoint"
VERSION = 1
HEADER_KEY = "__header__"


def content_checksum(tensors: dict[str, torch.Tensor | np.ndarray]) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes) in sorted name order."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_to_numpy(tensors[name]))
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode())
        digest.update(str(list(arr.shape)).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], header: dict[str, Any]) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: _to_numpy(t) for name, t in tensors.items()}
    if HEADER_KEY in arrays:
        raise ConfigurationError(f"parameter name {HEADER_KEY!r} is reserved")
    full = {
        "format": FORMAT,
        "version": VERSION,
        **header,
        "shapes": {name: list(a.shape) for name, a in arrays.items()},
        "checksum": content_checksum(arrays),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{HEADER_KEY: np.array(json.dumps(full, sort_keys=True))})
    return full


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if HEADER_KEY not in data.files:
            raise ConfigurationError(f"{path} has no checkpoint header")
        header = json.loads(str(data[HEADER_KEY]))
        tensors = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != HEADER_KEY}
    if header.get("format") != FORMAT:
        raise ConfigurationError(f"{path} is not a {FORMAT} file")
    shapes = {k: list(v.shape) for k, v in tensors.items()}
    if shapes != header.get("shapes"):
        raise ConfigurationError(f"{path}: array shapes disagree with header shape tags")
    if content_checksum(tensors) != header.get("checksum"):
        raise ConfigurationError(f"{path}: content checksum mismatch (file corrupted or edited)")
    return header, tensors


def header_checksum(path: str | Path) -> str:
    with np.load(Path(path), allow_pickle=False) as data:
        return json.loads(str(data[HEADER_KEY]))["checksum"]


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], source: str = "checkpoint") -> None:
    """Copy ``tensors`` into ``module``, demanding an exact name/shape match."""
    expected = {k: list(v.shape) for k, v in module.state_dict().items()}
    got = {k: list(v.shape) for k, v in tensors.items()}
    if expected.keys() != got.keys():
        missing = sorted(expected.keys() - got.keys())
        unexpected = sorted(got.keys() - expected.keys())
        raise ConfigurationError(f"{source}: parameter names differ (missing {missing[:5]}, unexpected {unexpected[:5]})")
    bad = [k for k in expected if expected[k] != got[k]]
    if bad:
        raise ConfigurationError(f"{source}: shape mismatch for {bad[:5]}")
    ref = next(iter(module.state_dict().values()), None)
    dtype = ref.dtype if ref is not None else torch.float32
    module.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})


def save_unet(path, model, provenance: dict | None = None) -> dict:
    header = {
        "kind": "unet",
        "config": model.config.to_dict(),
        "temporal_init": model.temporal_flags(),
        "provenance": provenance or {},
    }
    return save_checkpoint(path, model.state_dict(), header)


def load_unet(path):
    from .unet import UNet, UNetConfig

    header, tensors = load_checkpoint(path)
    if header.get("kind") != "unet":
        raise ConfigurationError(f"{path} holds a {header.get('kind')!r}, not a unet")
    model = UNet(UNetConfig.from_dict(header["config"]))
    load_into(model, tensors, str(path))
    model.set_temporal_flags(header.get("temporal_init", {}))
    model.eval()
    return model, header
