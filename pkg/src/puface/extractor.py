"""Small convolutional embedding network used both as the recognition
backbone and as the frozen extractor behind the purifier's feature loss."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import check_image, fingerprint, load_checkpoint, save_checkpoint, to_tensor
from .datasets import IdentityDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorConfig:
    image_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64
    pool_grid: int = 4
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-3
    logit_scale: float = 16.0
    augment_noise: float = 0.0  # max std of additive Gaussian noise during training
    augment_blur: float = 0.0  # max Gaussian blur sigma during training
    downsample: str = "avg"  # "avg" or "max" pooling between conv blocks
    seed: int = 0


class EmbeddingNet(nn.Module):
    """conv-relu-pool blocks, adaptive pooling to a small grid, linear projection.

    Pooling keeps a ``pool_grid`` x ``pool_grid`` layout: with a 1x1 global
    pool the net cannot see where structure sits in the image.
    """

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        layers, c_in = [], 3
        for c_out in cfg.channels:
            pool = nn.MaxPool2d(2) if cfg.downsample == "max" else nn.AvgPool2d(2)
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), pool]
            c_in = c_out
        layers += [nn.Conv2d(c_in, c_in, 3, padding=1), nn.ReLU()]
        layers.append(nn.AdaptiveAvgPool2d(cfg.pool_grid))
        self.features = nn.Sequential(*layers)
        self.project = nn.Linear(c_in * cfg.pool_grid ** 2, cfg.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).flatten(1)
        return F.normalize(self.project(h), dim=1, eps=1e-12)


class CosineHead(nn.Module):
    """Scaled cosine classifier over unit embeddings (training only)."""

    def __init__(self, dim: int, num_classes: int, scale: float):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, dim) * 0.1)
        self.scale = scale

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.scale * emb @ F.normalize(self.weight, dim=1).T


@dataclass(eq=False)
class ExtractorModel:
    config: ExtractorConfig
    net: EmbeddingNet
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.net.state_dict().items()}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable NCHW -> (N, d) unit embeddings (parameters frozen)."""
        return self.net(x)

    def save(self, path, extra_meta: dict | None = None):
        cfg = asdict(self.config)
        cfg["channels"] = list(cfg["channels"])
        return save_checkpoint(path, "extractor", cfg, self.net.state_dict(), {**self.meta, **(extra_meta or {})})

    @classmethod
    def load(cls, path) -> "ExtractorModel":
        payload = load_checkpoint(path, "extractor")
        cfg = dict(payload["config"])
        cfg["channels"] = tuple(cfg["channels"])
        config = ExtractorConfig(**cfg)
        net = EmbeddingNet(config)
        net.load_state_dict(payload["state"])
        return cls(config, net, payload["meta"])


def build_extractor(cfg: ExtractorConfig) -> ExtractorModel:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = EmbeddingNet(cfg)
    return ExtractorModel(cfg, net)


def _augment(x: torch.Tensor, cfg: ExtractorConfig, gen: torch.Generator) -> torch.Tensor:
    """Random blur and additive noise, per image, so the embedding tolerates
    mild natural distortions."""
    if cfg.augment_blur > 0:
        from .attacks import gaussian_kernel

        sigmas = torch.rand(len(x), generator=gen) * cfg.augment_blur
        # one grouped conv per axis; near-zero sigmas get a delta kernel (no blur)
        delta = torch.zeros(5, dtype=x.dtype)
        delta[2] = 1.0
        k = torch.stack([gaussian_kernel(float(s), 2, x.dtype) if s > 0.05 else delta for s in sigmas])
        n, c, h, w = x.shape
        k = k.repeat_interleave(c, 0)
        y = F.pad(x.reshape(1, n * c, h, w), (2, 2, 2, 2), mode="reflect")
        y = F.conv2d(y, k.view(n * c, 1, 1, 5), groups=n * c)
        x = F.conv2d(y, k.view(n * c, 1, 5, 1), groups=n * c).reshape(n, c, h, w)
    if cfg.augment_noise > 0:
        scale = torch.rand(len(x), 1, 1, 1, generator=gen) * cfg.augment_noise
        x = x + scale * torch.randn(x.shape, generator=gen)
    return x


def train_extractor(ds: IdentityDataset, cfg: ExtractorConfig = ExtractorConfig()) -> ExtractorModel:
    """Train an identity classifier on the train split; keep its embedding."""
    ids = ds.identities
    if len(ids) < 2:
        raise ValueError("extractor training needs at least 2 identities")
    idx = ds.train_idx if ds.is_split else np.arange(len(ds))
    x = to_tensor(ds.images[idx])
    lookup = {y: k for k, y in enumerate(ids)}
    y = torch.tensor([lookup[ds.labels[i]] for i in idx])

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = EmbeddingNet(cfg)
        head = CosineHead(cfg.embedding_dim, len(ids), cfg.logit_scale)
    params = list(net.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net.train()
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(x)))
        for start in range(0, len(x), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(head(net(_augment(x[b], cfg, gen))), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        acc = float((head(net(x)).argmax(1) == y).float().mean())
    log.info("extractor seed=%d train accuracy %.3f", cfg.seed, acc)
    meta = {
        "train_accuracy": acc,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "dataset_fingerprint": fingerprint(ds.images[idx], [ds.labels[i] for i in idx]),
        "identities": ids,
    }
    return ExtractorModel(cfg, net, meta)


def embed_batch(m: ExtractorModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (m.config.image_size, m.config.image_size, 3):
        raise ValueError(f"expected {m.config.image_size}x{m.config.image_size}x3 images, got {images.shape[1:]}")
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(m.net(to_tensor(images[start:start + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, m.config.embedding_dim), np.float32)


def embed(m: ExtractorModel, x: np.ndarray) -> np.ndarray:
    check_image(x, m.config.image_size)
    return embed_batch(m, x[None])[0]


def embed_gradient(
    m: ExtractorModel,
    x: np.ndarray,
    objective: Callable[[torch.Tensor], torch.Tensor],
    dtype=torch.float64,
) -> np.ndarray:
    """Gradient of ``objective(embedding)`` with respect to the image pixels.

    ``objective`` maps a (d,) embedding tensor to a scalar tensor. Runs in
    float64 by default so it can be checked against finite differences.
    """
    check_image(x, m.config.image_size)
    net = copy.deepcopy(m.net).to(dtype)
    xt = to_tensor(x, dtype).requires_grad_(True)
    value = objective(net(xt)[0])
    if not isinstance(value, torch.Tensor) or value.ndim != 0:
        raise TypeError("objective must return a scalar tensor")
    if not value.is_floating_point():
        raise ValueError("objective is not differentiable (non-float output)")
    if not value.requires_grad:
        return np.zeros_like(x, dtype=np.float64)
    (grad,) = torch.autograd.grad(value, xt, allow_unused=True)
    if grad is None:
        return np.zeros_like(x, dtype=np.float64)
    return grad[0].permute(1, 2, 0).numpy()


def embed_objective(m: ExtractorModel, x: np.ndarray, objective, dtype=torch.float64) -> float:
    """Scalar objective evaluated in the same precision as :func:`embed_gradient`."""
    net = copy.deepcopy(m.net).to(dtype)
    with torch.no_grad():
        return float(objective(net(to_tensor(x, dtype))[0]))
