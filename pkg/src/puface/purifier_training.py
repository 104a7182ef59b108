"""Amplified cloak/natural training pairs and the image + feature loss."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .attacks import AttackConfig, make_cloaks
from .core import fingerprint, to_tensor
from .datasets import IdentityDataset
from .extractor import ExtractorModel
from .purifier import PurifierConfig, PurifierModel, build_purifier

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PurifierTrainPair:
    natural: np.ndarray
    cloak: np.ndarray
    identity: str

    def __post_init__(self):
        if np.shape(self.natural) != np.shape(self.cloak):
            raise ValueError("cloak shape must match the natural image")


@dataclass(frozen=True)
class PurifierTrainConfig:
    alpha: float = 5.0
    lam: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def amplify(pair: PurifierTrainPair, alpha: float) -> np.ndarray:
    """clip(natural + alpha * cloak)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return np.clip(np.asarray(pair.natural) + alpha * np.asarray(pair.cloak), 0.0, 1.0).astype(np.float32)


def loss_terms(net, F_model: ExtractorModel, amplified: torch.Tensor, natural: torch.Tensor):
    """Per-batch (image MSE, feature MAE), each averaged over the batch."""
    out = net(amplified)
    image = ((out - natural) ** 2).flatten(1).mean(1).mean()
    with torch.no_grad():
        target = F_model.forward(natural)
    feature = (F_model.forward(out) - target).abs().mean(1).mean()
    return image, feature


def _stack(pairs: Sequence[PurifierTrainPair], alpha: float):
    natural = np.stack([np.asarray(p.natural, dtype=np.float32) for p in pairs])
    cloak = np.stack([np.asarray(p.cloak, dtype=np.float32) for p in pairs])
    return natural, np.clip(natural + alpha * cloak, 0.0, 1.0).astype(np.float32)


def combined_loss(
    m: PurifierModel, F_model: ExtractorModel, batch: Sequence[PurifierTrainPair], alpha: float, lam: float,
    dtype=torch.float32,
) -> tuple[float, dict[str, np.ndarray]]:
    """Image MSE + lam * feature MAE on amplified inputs, with gradients for
    the purifier's parameters only (the extractor stays frozen)."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    natural, amplified = _stack(batch, alpha)
    net = m.net.to(dtype) if dtype != torch.float32 else m.net
    f_net = F_model.net.to(dtype) if dtype != torch.float32 else F_model.net
    try:
        net.zero_grad()
        image, feature = loss_terms(net, F_model, to_tensor(amplified, dtype), to_tensor(natural, dtype))
        loss = image + lam * feature
        grads = torch.autograd.grad(loss, list(net.parameters()))
        names = [n for n, _ in net.named_parameters()]
        return loss.item(), {n: g.numpy().copy() for n, g in zip(names, grads)}
    finally:
        m.net.float()
        f_net.float()


def make_fawkes_pairs(
    ds: IdentityDataset, F_attack, cfg: AttackConfig = AttackConfig(), indices=None, chunk: int = 64
) -> list[PurifierTrainPair]:
    """Fawkes-cloak every (or every indexed) image of ``ds`` into training pairs.

    ``F_attack`` is one extractor or a list; with a list the k-th indexed
    image is cloaked against model ``k % len(list)``, so the pairs cover the
    cloak directions of several extractors. Pairs keep the order of ``indices``.
    """
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    models = list(F_attack) if isinstance(F_attack, (list, tuple)) else [F_attack]
    if not models:
        raise ValueError("need at least one attack model")
    cloaks = np.empty((len(idx),) + ds.images.shape[1:], dtype=np.float32)
    for m, model in enumerate(models):
        own = np.arange(m, len(idx), len(models))
        for start in range(0, len(own), chunk):
            part = own[start:start + chunk]
            # reseed per chunk so results do not depend on chunk boundaries elsewhere
            seed = cfg.seed + start + 100_003 * m
            cloaks[part] = make_cloaks(ds, idx[part], "fawkes", [model], AttackConfig(**{**asdict(cfg), "seed": seed}))
    return [PurifierTrainPair(ds.images[i], c, ds.labels[i]) for i, c in zip(idx, cloaks)]


def train_purifier(
    pairs: Sequence[PurifierTrainPair],
    F_model: ExtractorModel,
    cfg: PurifierTrainConfig = PurifierTrainConfig(),
    model_cfg: PurifierConfig | None = None,
    init: PurifierModel | None = None,
) -> PurifierModel:
    """Adam on the combined loss. Inputs are amplified cloaked images only;
    natural images appear only as targets."""
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    model = init if init is not None else build_purifier(model_cfg or PurifierConfig(seed=cfg.seed))
    natural, amplified = _stack(pairs, cfg.alpha)
    nat_t, amp_t = to_tensor(natural), to_tensor(amplified)
    net = model.net
    history = []

    def evaluate():
        net.eval()
        with torch.no_grad():
            parts = [loss_terms(net, F_model, amp_t[s:s + 64], nat_t[s:s + 64]) for s in range(0, len(nat_t), 64)]
        sizes = [min(64, len(nat_t) - s) for s in range(0, len(nat_t), 64)]
        image = sum(float(i) * n for (i, _), n in zip(parts, sizes)) / len(nat_t)
        feature = sum(float(f) * n for (_, f), n in zip(parts, sizes)) / len(nat_t)
        return image, feature

    image, feature = evaluate()
    history.append({"epoch": 0, "image_loss": image, "feature_loss": feature, "total": image + cfg.lam * feature})
    if cfg.epochs > 0:
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            order = torch.from_numpy(rng.permutation(len(nat_t)))
            for start in range(0, len(order), cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                img_loss, feat_loss = loss_terms(net, F_model, amp_t[b], nat_t[b])
                loss = img_loss + cfg.lam * feat_loss
                opt.zero_grad()
                loss.backward()
                opt.step()
            image, feature = evaluate()
            record = {"epoch": epoch, "image_loss": image, "feature_loss": feature, "total": image + cfg.lam * feature}
            history.append(record)
            log.debug("purifier epoch %(epoch)d image %(image_loss).5f feature %(feature_loss).5f", record)
    net.eval()
    model.meta = {
        "trained": cfg.epochs > 0,
        "train_config": asdict(cfg),
        "log": history,
        "num_pairs": len(pairs),
        "pairs_fingerprint": fingerprint(natural, [p.identity for p in pairs]),
    }
    return model
