"""Comparison defenses: a MagNet-style reformer and pixel deflection followed
by wavelet denoising."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .core import check_image, to_tensor
from .datasets import IdentityDataset
from .purifier import PurifierConfig, PurifierModel, build_purifier, purify_batch


@dataclass(frozen=True)
class MagnetConfig:
    noise_sigma: float = 0.025
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0


def train_magnet_reformer(
    naturals: np.ndarray, cfg: MagnetConfig = MagnetConfig(), model_cfg: PurifierConfig | None = None
) -> PurifierModel:
    """Autoencoder mapping clip(x + N(0, sigma^2)) back to x under plain MSE.

    Same network family as the purifier; no feature loss and no cloaks.
    """
    naturals = np.asarray(naturals, dtype=np.float32)
    if len(naturals) == 0:
        raise ValueError("no natural images to train on")
    model = build_purifier(model_cfg or PurifierConfig(seed=cfg.seed))
    net = model.net
    x = to_tensor(naturals)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = torch.from_numpy(rng.permutation(len(x)))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            b = x[order[start:start + cfg.batch_size]]
            noisy = (b + cfg.noise_sigma * torch.randn(b.shape, generator=gen)).clamp(0.0, 1.0)
            loss = ((net(noisy) - b) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        history.append({"epoch": epoch, "image_loss": total / len(x)})
    net.eval()
    model.meta = {"trained": cfg.epochs > 0, "defense": "magnet", "train_config": asdict(cfg), "log": history}
    return model


def pixel_deflection(x: np.ndarray, k: int = 200, window: int = 10, seed: int = 0) -> np.ndarray:
    """Replace ``k`` random pixels with a random pixel from their
    ``window``-radius neighbourhood in the original image."""
    x = check_image(x)
    h, w = x.shape[:2]
    if k < 0 or window < 1:
        raise ValueError("k must be >= 0 and window >= 1")
    if window >= min(h, w):
        raise ValueError(f"window {window} is larger than the {h}x{w} image")
    rng = np.random.default_rng(seed)
    out = np.array(x, copy=True)
    for _ in range(k):
        r, c = rng.integers(h), rng.integers(w)
        rr = rng.integers(max(0, r - window), min(h, r + window + 1))
        cc = rng.integers(max(0, c - window), min(w, c + window + 1))
        out[r, c] = x[rr, cc]
    return out


def _haar_forward(x: np.ndarray):
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    return (a + b + c + d) / 2, ((a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2)


def _haar_inverse(approx: np.ndarray, details) -> np.ndarray:
    hd, vd, dd = details
    out = np.empty((approx.shape[0] * 2, approx.shape[1] * 2), dtype=approx.dtype)
    out[0::2, 0::2] = (approx + hd + vd + dd) / 2
    out[0::2, 1::2] = (approx - hd + vd - dd) / 2
    out[1::2, 0::2] = (approx + hd - vd - dd) / 2
    out[1::2, 1::2] = (approx - hd - vd + dd) / 2
    return out


def haar_decompose(channel: np.ndarray, levels: int = 2):
    approx, details = channel, []
    for _ in range(levels):
        approx, d = _haar_forward(approx)
        details.append(d)
    return approx, details


def haar_reconstruct(approx: np.ndarray, details) -> np.ndarray:
    for d in reversed(details):
        approx = _haar_inverse(approx, d)
    return approx


def soft_threshold(c: np.ndarray, t: float) -> np.ndarray:
    return np.sign(c) * np.maximum(np.abs(c) - t, 0.0)


def wavelet_denoise(x: np.ndarray, sigma: float = 0.04, levels: int = 2) -> np.ndarray:
    """Orthonormal Haar transform per channel, soft-threshold the detail bands
    at ``sigma * sqrt(2 ln N)`` (universal threshold), invert, clip."""
    x = check_image(x)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    h, w = x.shape[:2]
    m = 2 ** levels
    ph, pw = (-h) % m, (-w) % m
    padded = np.pad(np.asarray(x, dtype=np.float64), ((0, ph), (0, pw), (0, 0)), mode="symmetric")
    t = sigma * np.sqrt(2.0 * np.log(h * w))
    out = np.empty_like(padded)
    for ch in range(3):
        approx, details = haar_decompose(padded[:, :, ch], levels)
        details = [tuple(soft_threshold(band, t) for band in level) for level in details]
        out[:, :, ch] = haar_reconstruct(approx, details)
    return np.clip(out[:h, :w], 0.0, 1.0).astype(np.asarray(x).dtype)


def desk_deflection_params(image_size: int, k: int = 200, window: int = 10, reference: int = 112) -> tuple[int, int]:
    """Rescale deflection count (by area) and window (by side) from 112px."""
    scale = image_size / reference
    return max(1, round(k * scale ** 2)), max(1, round(window * scale))


def deflect_and_denoise(x: np.ndarray, k: int, window: int, sigma: float = 0.04, seed: int = 0) -> np.ndarray:
    return wavelet_denoise(pixel_deflection(x, k, window, seed), sigma)


def deflect_dataset(ds: IdentityDataset, k: int, window: int, sigma: float = 0.04, seed: int = 0) -> IdentityDataset:
    idx = ds.train_idx if ds.is_split else np.arange(len(ds))
    out = np.stack([deflect_and_denoise(ds.images[i], k, window, sigma, seed + int(i)) for i in idx])
    return ds.with_images(idx, out)


def reform_dataset(m: PurifierModel, ds: IdentityDataset) -> IdentityDataset:
    idx = ds.train_idx if ds.is_split else np.arange(len(ds))
    return ds.with_images(idx, purify_batch(m, ds.images[idx]))
