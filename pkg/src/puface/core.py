"""Image/metric primitives and the checkpoint container shared by all models."""
from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Any

import numpy as np
import torch

CHECKPOINT_FORMAT = "puface-checkpoint"
CHECKPOINT_VERSION = 1


def clip_unit(x):
    """Clamp pixels into [0, 1]. Works on numpy arrays and torch tensors."""
    if isinstance(x, torch.Tensor):
        if not bool(torch.isfinite(x).all()):
            raise ValueError("non-finite pixels")
        return x.clamp(0.0, 1.0)
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite pixels")
    return np.clip(arr, 0.0, 1.0)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def mae(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.mean(np.abs(u - v)))


def check_image(x: np.ndarray, size: int | None = None) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {x.shape}")
    if size is not None and x.shape[:2] != (size, size):
        raise ValueError(f"expected {size}x{size} image, got {x.shape[0]}x{x.shape[1]}")
    return x


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """NHWC (or HWC) numpy images -> NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> NHWC float32 numpy."""
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def fingerprint(images: np.ndarray, labels) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype=np.float32).tobytes())
    h.update("\n".join(map(str, labels)).encode())
    return h.hexdigest()[:16]


def save_checkpoint(path, kind: str, config: dict, state: dict[str, Any], meta: dict | None = None) -> Path:
    """Write a checkpoint container.

    The container is a ``torch.save`` dict with keys ``format``, ``version``,
    ``kind`` (extractor / purifier / recognizer), ``config`` (JSON-able model
    config), ``state`` (named tensors) and ``meta`` (training metadata,
    dataset fingerprint, producing flags).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "state": state,
        "meta": meta or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a puface checkpoint")
    if kind is not None and payload["kind"] != kind:
        raise ValueError(f"{path} holds a {payload['kind']} checkpoint, expected {kind}")
    return payload


def state_distance(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> float:
    """L2 distance between two parameter dicts with identical keys."""
    total = 0.0
    for k in a:
        total += float(((a[k].double() - b[k].double()) ** 2).sum())
    return total ** 0.5


def states_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
