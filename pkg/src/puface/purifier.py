"""Symmetric conv/deconv purifier with additive skip connections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import check_image, load_checkpoint, save_checkpoint, to_numpy, to_tensor
from .datasets import IdentityDataset


@dataclass(frozen=True)
class PurifierConfig:
    depth: int = 5  # conv layers per side; RedNet30 uses 15
    features: int = 64
    kernel_size: int = 3
    skip_every: int = 2
    input_skip: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.skip_every < 2 or self.skip_every % 2:
            raise ValueError("skip_every must be a positive even number")
        if self.features < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("features must be >= 1 and kernel_size odd")


class RedNet(nn.Module):
    """Encoder of ``depth`` convolutions, decoder of ``depth`` transposed
    convolutions. The first conv halves the resolution and the last deconv
    restores it; every inner layer is stride 1 / padding 1.

    Conv layer ``i`` (1-based) with ``i % skip_every == 0`` feeds its output
    into the symmetric deconv output, which has the same shape, by addition
    before that layer's ReLU. The final deconv is linear; with ``input_skip``
    the input image itself (layer 0) is added to it, so the network predicts
    a residual.
    """

    def __init__(self, cfg: PurifierConfig):
        super().__init__()
        cfg.validate()
        n, k, p = cfg.features, cfg.kernel_size, cfg.kernel_size // 2
        self.depth = cfg.depth
        self.skip_every = cfg.skip_every
        self.input_skip = cfg.input_skip
        self.convs = nn.ModuleList(
            [nn.Conv2d(3, n, k, stride=2, padding=p)]
            + [nn.Conv2d(n, n, k, padding=p) for _ in range(cfg.depth - 1)]
        )
        self.deconvs = nn.ModuleList(
            [nn.ConvTranspose2d(n, n, k, padding=p) for _ in range(cfg.depth - 1)]
            + [nn.ConvTranspose2d(n, 3, k, stride=2, padding=p)]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = {}
        h = x
        for i, conv in enumerate(self.convs, start=1):
            h = F.relu(conv(h))
            if i % self.skip_every == 0 and i < self.depth:
                skips[i] = h
        for j, deconv in enumerate(self.deconvs, start=1):
            if j == self.depth:
                out = deconv(h, output_size=x.shape[-2:])
                return out + x if self.input_skip else out
            h = deconv(h)
            mirror = self.depth - j  # conv layer whose output shape matches
            if mirror in skips:
                h = h + skips[mirror]
            h = F.relu(h)
        return h


@dataclass(eq=False)
class PurifierModel:
    config: PurifierConfig
    net: RedNet
    meta: dict = field(default_factory=dict)

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.net.state_dict().items()}

    def save(self, path, extra_meta: dict | None = None):
        return save_checkpoint(path, "purifier", asdict(self.config), self.net.state_dict(),
                               {**self.meta, **(extra_meta or {})})

    @classmethod
    def load(cls, path) -> "PurifierModel":
        payload = load_checkpoint(path, "purifier")
        config = PurifierConfig(**payload["config"])
        net = RedNet(config)
        net.load_state_dict(payload["state"])
        net.eval()
        return cls(config, net, payload["meta"])


def build_purifier(cfg: PurifierConfig = PurifierConfig()) -> PurifierModel:
    cfg.validate()
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = RedNet(cfg)
    net.eval()
    return PurifierModel(cfg, net, {"trained": False})


def purify_batch(m: PurifierModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    out = []
    m.net.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            y = m.net(to_tensor(images[start:start + batch_size])).clamp(0.0, 1.0)
            out.append(to_numpy(y))
    return np.concatenate(out) if out else images.copy()


def purify(m: PurifierModel, x: np.ndarray, size: int | None = None) -> np.ndarray:
    check_image(x, size)
    return purify_batch(m, x[None])[0]


def purify_dataset(m: PurifierModel, ds: IdentityDataset) -> IdentityDataset:
    """Purify every train image; test images and labels are left alone."""
    idx = ds.train_idx if ds.is_split else np.arange(len(ds))
    return ds.with_images(idx, purify_batch(m, ds.images[idx]))
