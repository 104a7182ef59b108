"""The model trainer's recognizers: 1NN over embeddings, a linear softmax
head over frozen embeddings, and full fine-tuning of backbone + head."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import load_checkpoint, save_checkpoint, to_tensor
from .datasets import IdentityDataset
from .extractor import EmbeddingNet, ExtractorConfig, ExtractorModel, embed_batch

KINDS = ("one_nn", "linear", "finetune")


@dataclass(frozen=True)
class HeadConfig:
    epochs: int = 100
    learning_rate: float = 0.05
    batch_size: int = 32
    head_learning_rate: float | None = None  # fine-tuning only: lr of the new linear layer
    seed: int = 0


FINETUNE_DEFAULTS = HeadConfig(epochs=20, learning_rate=1e-3, head_learning_rate=0.05)


@dataclass(eq=False)
class RecognitionModel:
    kind: str
    backbone: ExtractorModel
    labels: list[str]
    head: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def logits(self, images: np.ndarray) -> np.ndarray:
        emb = embed_batch(self.backbone, images).astype(np.float64)
        return emb @ self.head["weight"].T.astype(np.float64) + self.head["bias"].astype(np.float64)

    def save(self, path, extra_meta: dict | None = None):
        cfg = asdict(self.backbone.config)
        cfg["channels"] = list(cfg["channels"])
        state = {f"backbone.{k}": v for k, v in self.backbone.net.state_dict().items()}
        state.update({f"head.{k}": torch.from_numpy(np.asarray(v)) for k, v in (self.head or {}).items()
                      if k != "labels"})  # 1NN labels travel in meta["stored_labels"]
        config = {"kind": self.kind, "labels": list(self.labels), "backbone": cfg}
        return save_checkpoint(path, "recognizer", config, state, {**self.meta, **(extra_meta or {})})

    @classmethod
    def load(cls, path) -> "RecognitionModel":
        payload = load_checkpoint(path, "recognizer")
        cfg = dict(payload["config"]["backbone"])
        cfg["channels"] = tuple(cfg["channels"])
        bcfg = ExtractorConfig(**cfg)
        net = EmbeddingNet(bcfg)
        state = payload["state"]
        net.load_state_dict({k[len("backbone."):]: v for k, v in state.items() if k.startswith("backbone.")})
        head = {k[len("head."):]: v.numpy() for k, v in state.items() if k.startswith("head.")}
        if payload["config"]["kind"] == "one_nn" and "stored_labels" in payload["meta"]:
            head["labels"] = np.array(payload["meta"]["stored_labels"])
        return cls(payload["config"]["kind"], ExtractorModel(bcfg, net), list(payload["config"]["labels"]), head or None,
                   payload["meta"])


def _train_part(ds: IdentityDataset) -> tuple[np.ndarray, list[str]]:
    idx = ds.train_idx if ds.is_split else np.arange(len(ds))
    return ds.images[idx], [ds.labels[i] for i in idx]


def train_1nn(E: ExtractorModel, ds: IdentityDataset) -> RecognitionModel:
    images, labels = _train_part(ds)
    if len(images) == 0:
        raise ValueError("empty train set")
    head = {"embeddings": embed_batch(E, images), "labels": np.array(labels)}
    return RecognitionModel("one_nn", E, sorted(set(labels)), head, {"stored_labels": labels})


def _fit_head(
    net: nn.Module | None, emb_or_images: torch.Tensor, y: torch.Tensor, n_classes: int, dim: int, cfg: HeadConfig
) -> tuple[nn.Linear, nn.Module | None]:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        linear = nn.Linear(dim, n_classes)
    groups = [{"params": list(linear.parameters()), "lr": cfg.head_learning_rate or cfg.learning_rate}]
    if net is not None:
        groups.append({"params": list(net.parameters()), "lr": cfg.learning_rate})
    opt = torch.optim.Adam(groups)
    rng = np.random.default_rng(cfg.seed)
    if net is not None:
        net.train()
    for _ in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(y)))
        for start in range(0, len(y), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            feats = emb_or_images[b] if net is None else net(emb_or_images[b])
            loss = F.cross_entropy(linear(feats), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    if net is not None:
        net.eval()
    return linear, net


def _labelled(ds: IdentityDataset):
    images, labels = _train_part(ds)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("at least 2 identities are required")
    lookup = {c: k for k, c in enumerate(classes)}
    return images, classes, torch.tensor([lookup[l] for l in labels])


def _head_dict(linear: nn.Linear) -> dict[str, np.ndarray]:
    return {"weight": linear.weight.detach().numpy().copy(), "bias": linear.bias.detach().numpy().copy()}


def train_linear(E: ExtractorModel, ds: IdentityDataset, cfg: HeadConfig = HeadConfig()) -> RecognitionModel:
    """Softmax-linear head on frozen embeddings; the backbone is untouched."""
    images, classes, y = _labelled(ds)
    emb = torch.from_numpy(embed_batch(E, images))
    linear, _ = _fit_head(None, emb, y, len(classes), E.config.embedding_dim, cfg)
    return RecognitionModel("linear", E, classes, _head_dict(linear), {"head_config": asdict(cfg)})


def train_finetune(E: ExtractorModel, ds: IdentityDataset, cfg: HeadConfig = FINETUNE_DEFAULTS) -> RecognitionModel:
    """Linear layer on top of a copy of ``E``; every parameter is trained."""
    images, classes, y = _labelled(ds)
    net = copy.deepcopy(E.net)
    for p in net.parameters():
        p.requires_grad_(True)
    linear, net = _fit_head(net, to_tensor(images), y, len(classes), E.config.embedding_dim, cfg)
    backbone = ExtractorModel(E.config, net, {**E.meta, "finetuned": True})
    return RecognitionModel("finetune", backbone, classes, _head_dict(linear), {"head_config": asdict(cfg)})


def train_recognizer(kind: str, E: ExtractorModel, ds: IdentityDataset, cfg: HeadConfig | None = None) -> RecognitionModel:
    if kind == "one_nn":
        return train_1nn(E, ds)
    if kind == "linear":
        return train_linear(E, ds, cfg or HeadConfig())
    if kind == "finetune":
        return train_finetune(E, ds, cfg or FINETUNE_DEFAULTS)
    raise ValueError(f"unknown recognizer kind {kind!r}; expected one of {KINDS}")


def predict_batch(m: RecognitionModel, images: np.ndarray) -> list[str]:
    if m.head is None:
        raise RuntimeError("recognizer is not trained")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if m.kind == "one_nn":
        query = embed_batch(m.backbone, images).astype(np.float64)
        stored = m.head["embeddings"].astype(np.float64)
        labels = m.head["labels"]
        out = []
        for q in query:
            row = ((stored - q) ** 2).sum(1)
            # ties (exact) go to the lexicographically smallest label
            out.append(min(labels[row == row.min()]))
        return [str(o) for o in out]
    logits = m.logits(images)
    return [m.labels[k] for k in logits.argmax(1)]


def predict(m: RecognitionModel, x: np.ndarray) -> str:
    return predict_batch(m, np.asarray(x)[None])[0]
