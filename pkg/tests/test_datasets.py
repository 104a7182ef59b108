import numpy as np
import pytest
from PIL import Image

from puface.core import mse
from puface.datasets import (
    IdentityDataset, SynthIdentitySpec, export_directory, generate_synthetic, load_directory, split,
)


def _write_tree(root, n_ids=2, per=3, size=12):
    rng = np.random.default_rng(0)
    for j in range(n_ids):
        d = root / f"person{j}"
        d.mkdir(parents=True)
        for i in range(per):
            Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(d / f"{i}.png")


def test_load_directory_counts(tmp_path):
    _write_tree(tmp_path)
    ds = load_directory(tmp_path, image_size=16)
    assert len(ds) == 6
    assert ds.identities == ["person0", "person1"]
    assert ds.images.shape == (6, 16, 16, 3)
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    assert ds.meta["warnings"] == 0


def test_load_directory_skips_unreadable(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "person1" / "2.png").write_bytes(b"not a png")
    ds = load_directory(tmp_path, image_size=16)
    assert len(ds) == 5
    assert ds.meta["warnings"] == 1


def test_load_directory_empty(tmp_path):
    with pytest.raises(ValueError):
        load_directory(tmp_path)


def test_synthetic_is_deterministic():
    spec = SynthIdentitySpec(2, 4, 32, 0.1, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.images, b.images) and a.labels == b.labels


def test_zero_jitter_gives_identical_images():
    ds = generate_synthetic(SynthIdentitySpec(2, 4, 16, 0.0, seed=3))
    for identity in ds.identities:
        imgs = ds.images[ds.indices_of(identity)]
        assert all(np.array_equal(imgs[0], im) for im in imgs)


def test_intra_identity_closer_than_inter():
    ds = generate_synthetic(SynthIdentitySpec(10, 20, 32, 0.15, seed=1))
    labels = np.array(ds.labels)
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    d = ((flat[:, None] - flat[None]) ** 2).mean(-1)
    same = labels[:, None] == labels[None]
    off_diag = ~np.eye(len(ds), dtype=bool)
    assert d[same & off_diag].mean() < d[~same].mean()


@pytest.mark.parametrize("bad", [
    dict(num_identities=1), dict(images_per_identity=3), dict(jitter_scale=1.5), dict(image_size=4),
])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        generate_synthetic(SynthIdentitySpec(**bad))


def test_default_synthetic_is_pixel_separable():
    ds = split(generate_synthetic(SynthIdentitySpec()), 0.7, seed=0)
    tr = ds.train_images().reshape(len(ds.train_idx), -1)
    te = ds.test_images().reshape(len(ds.test_idx), -1)
    d = ((te[:, None] - tr[None]) ** 2).sum(-1)
    pred = np.array(ds.train_labels())[d.argmin(1)]
    assert (pred == np.array(ds.test_labels())).mean() > 0.9


def _partition_ok(ds):
    tr, te = set(ds.train_idx.tolist()), set(ds.test_idx.tolist())
    return not (tr & te) and tr | te == set(range(len(ds)))


def test_split_70_30():
    ds = split(generate_synthetic(SynthIdentitySpec(3, 10, 16, 0.1, seed=0)), 0.7, seed=0)
    for identity in ds.identities:
        assert len(ds.indices_of(identity, "train")) == 7
        assert len(ds.indices_of(identity, "test")) == 3
    assert _partition_ok(ds)


def test_split_minimum_two_train():
    ds = IdentityDataset(np.zeros((3, 8, 8, 3)), ("a",) * 3, tuple(f"a/{i}" for i in range(3)))
    s = split(ds, 0.7)
    assert len(s.train_idx) == 2 and len(s.test_idx) == 1


def test_split_deterministic_and_errors():
    base = generate_synthetic(SynthIdentitySpec(4, 6, 16, 0.1, seed=2))
    a, b = split(base, 0.7, seed=5), split(base, 0.7, seed=5)
    assert np.array_equal(a.train_idx, b.train_idx)
    with pytest.raises(ValueError):
        split(base, 1.0)
    tiny = IdentityDataset(np.zeros((2, 8, 8, 3)), ("solo", "solo"), ("solo/0", "solo/1"))
    with pytest.raises(ValueError, match="solo"):
        split(tiny, 0.7)


@pytest.mark.parametrize("seed", range(5))
def test_partition_property(seed):
    spec = SynthIdentitySpec(3, 4 + seed, 16, 0.1, seed=seed)
    assert _partition_ok(split(generate_synthetic(spec), 0.5 + 0.1 * seed, seed=seed))


def test_export_roundtrip_keeps_split(tmp_path):
    ds = split(generate_synthetic(SynthIdentitySpec(2, 5, 16, 0.1, seed=0)), 0.7, seed=0)
    export_directory(ds, tmp_path)
    back = load_directory(tmp_path, image_size=16)
    assert back.names == ds.names
    assert np.array_equal(back.train_idx, ds.train_idx)
    assert mse(back.images, ds.images) < (0.5 / 255) ** 2


def test_images_are_read_only():
    ds = generate_synthetic(SynthIdentitySpec(2, 4, 16, 0.1))
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0
