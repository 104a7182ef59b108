"""Fawkes-style targeted and Lowkey-style untargeted cloaks (L-inf PGD)."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .core import to_numpy, to_tensor
from .datasets import IdentityDataset
from .extractor import ExtractorModel

log = logging.getLogger(__name__)

ATTACKS = ("fawkes", "lowkey")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.06
    steps: int = 40
    step_size: float | None = None  # epsilon / 10 when unset
    blur_sigma: float = 1.0
    blur_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size


def gaussian_kernel(sigma: float, radius: int, dtype=torch.float32) -> torch.Tensor:
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x: torch.Tensor, sigma: float = 1.0, radius: int = 2) -> torch.Tensor:
    """Separable Gaussian blur on NCHW with reflected edges."""
    if sigma <= 0:
        return x
    k = gaussian_kernel(sigma, radius, x.dtype)
    c = x.shape[1]
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def fawkes_objective(m: ExtractorModel, x: torch.Tensor, c: torch.Tensor, target_emb: torch.Tensor) -> torch.Tensor:
    """Per-image MAE between F(clip(x + c)) and the target embedding."""
    emb = m.forward((x + c).clamp(0.0, 1.0))
    return (emb - target_emb).abs().mean(dim=1)


def lowkey_objective(
    ensemble: Sequence[ExtractorModel], x: torch.Tensor, c: torch.Tensor, blur_sigma: float, blur_radius: int = 2
) -> torch.Tensor:
    """Per-image feature distance from the natural image, with and without blur,
    averaged over the ensemble."""
    xc = (x + c).clamp(0.0, 1.0)
    blurred = gaussian_blur(xc, blur_sigma, blur_radius)
    total = 0.0
    for m in ensemble:
        ref = m.forward(x).detach()
        total = total + (m.forward(xc) - ref).abs().mean(1) + (m.forward(blurred) - ref).abs().mean(1)
    return total / len(ensemble)


def _pgd(objective, x: torch.Tensor, cfg: AttackConfig, maximize: bool) -> torch.Tensor:
    """Signed-gradient PGD from a zero start; returns the best iterate per image."""
    eps = torch.tensor(cfg.epsilon, dtype=x.dtype)
    sign = 1.0 if maximize else -1.0
    c = torch.zeros_like(x)
    best_c = c.clone()
    best = None
    for step in range(cfg.steps + 1):
        c.requires_grad_(True)
        value = objective(c)
        improved = torch.ones_like(value, dtype=torch.bool) if best is None else (
            value > best if maximize else value < best
        )
        best = value.detach() if best is None else torch.where(improved, value.detach(), best)
        best_c[improved] = c.detach()[improved]
        if step == cfg.steps:
            break
        (grad,) = torch.autograd.grad(value.sum(), c)
        with torch.no_grad():
            c = c + sign * cfg.alpha * grad.sign()
            # keep x + c inside the pixel range, then the budget last so it holds exactly
            c = torch.minimum(torch.maximum(c, -x), 1.0 - x)
            c = torch.maximum(torch.minimum(c, eps), -eps)
    return best_c


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    return (x[None], True) if x.ndim == 3 else (x, False)


def fawkes_cloak(x: np.ndarray, target: np.ndarray, F_model: ExtractorModel, cfg: AttackConfig = AttackConfig()) -> np.ndarray:
    """Cloak pulling F(x + c) toward F(target); accepts HWC or NHWC arrays."""
    xb, single = _as_batch(x)
    tb, _ = _as_batch(target)
    if xb.shape != tb.shape:
        raise ValueError(f"shape mismatch: {xb.shape} vs {tb.shape}")
    xt = to_tensor(xb)
    with torch.no_grad():
        target_emb = F_model.forward(to_tensor(tb))
    c = _pgd(lambda c: fawkes_objective(F_model, xt, c, target_emb), xt, cfg, maximize=False)
    out = to_numpy(c)
    return out[0] if single else out


def lowkey_cloak(x: np.ndarray, ensemble: Sequence[ExtractorModel], cfg: AttackConfig = AttackConfig()) -> np.ndarray:
    """Cloak pushing the ensemble's features away from the natural image."""
    if not ensemble:
        raise ValueError("lowkey needs a non-empty ensemble")
    xb, single = _as_batch(x)
    xt = to_tensor(xb)
    c = _pgd(lambda c: lowkey_objective(ensemble, xt, c, cfg.blur_sigma, cfg.blur_radius), xt, cfg, maximize=True)
    out = to_numpy(c)
    return out[0] if single else out


def fawkes_targets(ds: IdentityDataset, indices: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn train image of a different identity per index."""
    pool = ds.train_idx if ds.is_split else np.arange(len(ds))
    labels = np.array(ds.labels)
    picks = []
    for i in indices:
        candidates = pool[labels[pool] != labels[i]]
        if len(candidates) == 0:
            raise ValueError("fawkes needs at least one other identity")
        picks.append(candidates[rng.integers(len(candidates))])
    return np.array(picks, dtype=np.int64)


def _as_list(models) -> list[ExtractorModel]:
    return list(models) if isinstance(models, (list, tuple)) else [models]


def make_cloaks(ds: IdentityDataset, indices, attack: str, models, cfg: AttackConfig) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    models = _as_list(models)
    if attack == "fawkes":
        targets = fawkes_targets(ds, indices, np.random.default_rng(cfg.seed))
        return fawkes_cloak(ds.images[indices], ds.images[targets], models[0], cfg)
    if attack == "lowkey":
        return lowkey_cloak(ds.images[indices], models, cfg)
    raise ValueError(f"unknown attack {attack!r}; expected one of {ATTACKS}")


def cloak_identity(ds: IdentityDataset, attacker: str, attack: str, models, cfg: AttackConfig = AttackConfig()) -> IdentityDataset:
    """Copy of ``ds`` with every train image of ``attacker`` cloaked."""
    if attacker not in ds.identities:
        raise ValueError(f"unknown identity {attacker!r}")
    if attack not in ATTACKS:
        raise ValueError(f"unknown attack {attack!r}; expected one of {ATTACKS}")
    idx = ds.indices_of(attacker, "train")
    cloaks = make_cloaks(ds, idx, attack, models, cfg)
    out = ds.with_images(idx, np.clip(ds.images[idx] + cloaks, 0.0, 1.0))
    out.meta["attack"] = {
        "attack": attack, "attacker": attacker, "epsilon": cfg.epsilon, "steps": cfg.steps,
        "step_size": cfg.alpha, "blur_sigma": cfg.blur_sigma, "seed": cfg.seed,
        "cloaked": [ds.names[i] for i in idx],
    }
    return out
