"""Identity-labelled image collections: synthetic generation, disk I/O, splitting."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .core import clip_unit

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MANIFEST = "manifest.json"


@dataclass(frozen=True, eq=False)
class IdentityDataset:
    """Images (N, H, W, 3) in [0, 1] with one identity string per image.

    ``train_idx``/``test_idx`` partition ``range(N)``; both are empty until
    :func:`split` has been applied (or a manifest carried a split).
    """

    images: np.ndarray
    labels: tuple[str, ...]
    names: tuple[str, ...]
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4 or images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {images.shape}")
        if len(self.labels) != len(images) or len(self.names) != len(images):
            raise ValueError("labels/names must match the number of images")
        if min(images.shape[1:3]) < 8:
            raise ValueError("images must be at least 8x8")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        for attr in ("train_idx", "test_idx"):
            idx = np.asarray(getattr(self, attr), dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, attr, idx)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def identities(self) -> list[str]:
        return sorted(set(self.labels))

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    @property
    def is_split(self) -> bool:
        return len(self.train_idx) + len(self.test_idx) == len(self)

    def indices_of(self, identity: str, part: str | None = None) -> np.ndarray:
        pool = {"train": self.train_idx, "test": self.test_idx, None: np.arange(len(self))}[part]
        return np.array([i for i in pool if self.labels[i] == identity], dtype=np.int64)

    def train_images(self) -> np.ndarray:
        return self.images[self.train_idx]

    def train_labels(self) -> list[str]:
        return [self.labels[i] for i in self.train_idx]

    def test_images(self) -> np.ndarray:
        return self.images[self.test_idx]

    def test_labels(self) -> list[str]:
        return [self.labels[i] for i in self.test_idx]

    def with_images(self, indices, new_images) -> "IdentityDataset":
        """Copy with ``images[indices]`` replaced; labels and split preserved."""
        images = np.array(self.images, copy=True)
        images[np.asarray(indices, dtype=np.int64)] = new_images
        return replace(self, images=images, meta=dict(self.meta))

    def subset(self, identities) -> "IdentityDataset":
        keep = set(identities)
        idx = [i for i, y in enumerate(self.labels) if y in keep]
        remap = {old: new for new, old in enumerate(idx)}
        return IdentityDataset(
            images=self.images[idx],
            labels=tuple(self.labels[i] for i in idx),
            names=tuple(self.names[i] for i in idx),
            train_idx=np.array([remap[i] for i in self.train_idx if i in remap], dtype=np.int64),
            test_idx=np.array([remap[i] for i in self.test_idx if i in remap], dtype=np.int64),
            meta=dict(self.meta),
        )


@dataclass(frozen=True)
class SynthIdentitySpec:
    num_identities: int = 10
    images_per_identity: int = 20
    image_size: int = 32
    jitter_scale: float = 0.06
    seed: int = 0
    identity_scale: float = 0.2
    identity_dims: int = 24  # shared smooth fields mixed per identity
    jitter_dims: int = 6  # shared low-frequency fields mixed per image

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")
        if self.images_per_identity < 4:
            raise ValueError("images_per_identity must be >= 4")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not 0.0 <= self.jitter_scale <= 1.0:
            raise ValueError("jitter_scale must lie in [0, 1]")
        if self.identity_scale < 0:
            raise ValueError("identity_scale must be >= 0")
        if self.identity_dims < 1 or self.jitter_dims < 1:
            raise ValueError("identity_dims and jitter_dims must be >= 1")


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((size, size, 3))
    field_ = gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="reflect")
    field_ -= field_.mean()
    return field_ / (field_.std() + 1e-12)


def generate_synthetic(spec: SynthIdentitySpec) -> IdentityDataset:
    """Seeded toy identities on a low-dimensional image manifold.

    Every image is ``clip(template + identity + jitter)``. The template and
    two banks of smooth fields are shared by the whole population (fixed by
    ``seed`` alone); an identity is a Gaussian mix of the identity bank with
    std ``identity_scale``, and each image adds a Gaussian mix of the coarser
    jitter bank (lighting-like nuisance) with std ``jitter_scale``. Identities
    are spawned per index, so growing ``num_identities`` keeps earlier ones.
    Same spec gives a bit-identical dataset.
    """
    spec.validate()
    s = spec.image_size
    bank = np.random.default_rng([spec.seed, 2**31 - 1])
    template = 0.5 + 0.15 * _smooth_field(bank, s, s / 6)
    id_bank = np.stack([0.8 * _smooth_field(bank, s, s / 10) for _ in range(spec.identity_dims)])
    jit_bank = np.stack([_smooth_field(bank, s, s / 4) for _ in range(spec.jitter_dims)])
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_identities)
    images, labels, names = [], [], []
    for j, child in enumerate(children):
        rng = np.random.default_rng(child)
        z = rng.standard_normal(spec.identity_dims) / np.sqrt(spec.identity_dims)
        base = template + spec.identity_scale * np.tensordot(z, id_bank, 1)
        identity = f"id{j:03d}"
        for i in range(spec.images_per_identity):
            w = rng.standard_normal(spec.jitter_dims) / np.sqrt(spec.jitter_dims)
            images.append(clip_unit(base + spec.jitter_scale * np.tensordot(w, jit_bank, 1)))
            labels.append(identity)
            names.append(f"{identity}/{i:03d}.png")
    return IdentityDataset(
        images=np.stack(images).astype(np.float32),
        labels=tuple(labels),
        names=tuple(names),
        meta={"source": "synthetic", "spec": spec.__dict__.copy()},
    )


def split(ds: IdentityDataset, train_fraction: float = 0.7, seed: int = 0) -> IdentityDataset:
    """Per-identity split: floor(n * train_fraction) train images, at least 2."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for identity in ds.identities:
        idx = ds.indices_of(identity)
        if len(idx) < 3:
            raise ValueError(f"identity {identity!r} has {len(idx)} images; at least 3 are needed")
        idx = idx[rng.permutation(len(idx))]
        n_train = max(2, math.floor(len(idx) * train_fraction))
        train.extend(idx[:n_train])
        test.extend(idx[n_train:])
    meta = dict(ds.meta, split={"train_fraction": train_fraction, "seed": seed})
    return replace(ds, train_idx=np.sort(train), test_idx=np.sort(test), meta=meta)


def _read_image(path: Path, size: int) -> np.ndarray:
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), PILImage.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_directory(root, image_size: int = 32) -> IdentityDataset:
    """Read ``root/<identity>/<image>``. Unreadable files are skipped and
    counted in ``meta['warnings']``. A ``manifest.json`` split is honoured."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(str(root))
    images, labels, names, skipped = [], [], [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(p for p in sub.iterdir() if p.is_file()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                images.append(_read_image(f, image_size))
            except Exception as exc:  # PIL raises a zoo of exception types
                log.warning("skipping %s: %s", f, exc)
                skipped.append(str(f.relative_to(root)))
                continue
            labels.append(sub.name)
            names.append(f"{sub.name}/{f.name}")
    if not images:
        raise ValueError(f"no images found under {root}")

    manifest = {}
    if (root / MANIFEST).exists():
        manifest = json.loads((root / MANIFEST).read_text())
    meta = dict(manifest.get("meta", {}))
    meta.update(source=str(root), warnings=len(skipped), skipped=skipped)
    train_idx = test_idx = np.zeros(0, dtype=np.int64)
    parts = manifest.get("split")
    if parts:
        train_idx = np.array([i for i, n in enumerate(names) if parts.get(n) == "train"], dtype=np.int64)
        test_idx = np.array([i for i, n in enumerate(names) if parts.get(n) == "test"], dtype=np.int64)
    return IdentityDataset(
        images=np.stack(images), labels=tuple(labels), names=tuple(names),
        train_idx=train_idx, test_idx=test_idx, meta=meta,
    )


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_directory(ds: IdentityDataset, root, images_u8: np.ndarray | None = None, extra: dict | None = None) -> Path:
    """Write PNGs in the ``root/<identity>/<file>`` layout plus a manifest.

    ``images_u8`` overrides the default rounding of ``ds.images`` (used by
    the attack command to keep quantised cloaks inside the budget).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(ds.images) if images_u8 is None else images_u8
    for name, img in zip(ds.names, pixels):
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(img).save(path, format="PNG")
    parts = {}
    for i in ds.train_idx:
        parts[ds.names[i]] = "train"
    for i in ds.test_idx:
        parts[ds.names[i]] = "test"
    manifest = {"meta": _jsonable(ds.meta), "split": parts}
    if extra:
        manifest.update(_jsonable(extra))
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))
