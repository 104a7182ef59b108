import copy

import numpy as np
import pytest
import torch

from puface.core import state_distance, states_equal
from puface.extractor import (
    ExtractorModel, build_extractor, embed, embed_batch, embed_gradient, embed_objective, train_extractor,
)

from conftest import TINY_E


def test_embeddings_are_unit_norm(tiny_E, tiny_ds):
    e = embed_batch(tiny_E, tiny_ds.images)
    assert e.shape == (len(tiny_ds), TINY_E.embedding_dim)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)


def test_embed_is_pure(tiny_E, tiny_ds):
    x = tiny_ds.images[0].copy()
    a, b = embed(tiny_E, x), embed(tiny_E, x)
    assert np.array_equal(a, b)
    assert np.array_equal(x, tiny_ds.images[0])


def test_batch_matches_single(tiny_E, tiny_ds):
    batch = embed_batch(tiny_E, tiny_ds.images[:5])
    single = np.stack([embed(tiny_E, x) for x in tiny_ds.images[:5]])
    np.testing.assert_allclose(batch, single, atol=1e-6)


def test_wrong_image_size_rejected(tiny_E):
    with pytest.raises(ValueError):
        embed(tiny_E, np.zeros((20, 20, 3), np.float32))


def test_parameters_frozen(tiny_E):
    assert all(not p.requires_grad for p in tiny_E.net.parameters())


def test_training_is_seed_deterministic(tiny_ds, tiny_E):
    again = train_extractor(tiny_ds, TINY_E)
    assert states_equal(again.state(), tiny_E.state())


def test_different_seeds_differ(tiny_ds, tiny_E):
    from dataclasses import replace

    other = train_extractor(tiny_ds, replace(TINY_E, seed=7))
    assert state_distance(other.state(), tiny_E.state()) > 1e-3


def test_training_records_meta(tiny_E, tiny_ds):
    assert 0.0 <= tiny_E.meta["train_accuracy"] <= 1.0
    assert tiny_E.meta["identities"] == tiny_ds.identities


def test_needs_two_identities(tiny_ds):
    with pytest.raises(ValueError):
        train_extractor(tiny_ds.subset(tiny_ds.identities[:1]), TINY_E)


def test_checkpoint_roundtrip_bitwise(tiny_E, tiny_ds, tmp_path):
    path = tiny_E.save(tmp_path / "e.pt")
    loaded = ExtractorModel.load(path)
    assert states_equal(loaded.state(), tiny_E.state())
    assert np.array_equal(embed_batch(loaded, tiny_ds.images), embed_batch(tiny_E, tiny_ds.images))
    loaded.save(tmp_path / "e2.pt")
    assert states_equal(ExtractorModel.load(tmp_path / "e2.pt").state(), tiny_E.state())


def test_gradient_matches_finite_differences(tiny_E, tiny_ds, rng):
    target = torch.from_numpy(embed(tiny_E, tiny_ds.images[-1]).astype(np.float64))
    objective = lambda e: (e - target).abs().mean()  # noqa: E731
    x = tiny_ds.images[0].astype(np.float64)
    g = embed_gradient(tiny_E, x, objective)
    h = 1e-6
    for _ in range(20):
        v = rng.standard_normal(x.shape)
        fd = (embed_objective(tiny_E, x + h * v, objective) - embed_objective(tiny_E, x - h * v, objective)) / (2 * h)
        an = float((g * v).sum())
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


def test_gradient_of_constant_is_zero(tiny_E, tiny_ds):
    g = embed_gradient(tiny_E, tiny_ds.images[0], lambda e: torch.tensor(3.0, dtype=torch.float64))
    assert not g.any()


def test_gradient_rejects_bad_objectives(tiny_E, tiny_ds):
    with pytest.raises(TypeError):
        embed_gradient(tiny_E, tiny_ds.images[0], lambda e: e)
    with pytest.raises(ValueError):
        embed_gradient(tiny_E, tiny_ds.images[0], lambda e: (e > 0).sum())


def test_build_is_seeded():
    a, b = build_extractor(TINY_E), build_extractor(TINY_E)
    assert states_equal(a.state(), b.state())


def test_gradient_zero_at_minimum(tiny_E, tiny_ds):
    # MAE against its own stop-gradient copy sits at the minimum
    g = embed_gradient(tiny_E, tiny_ds.images[2], lambda e: (e - e.detach()).abs().mean())
    assert not g.any()


def test_same_identity_closer_than_cross_identity(small_E, small_ds):
    e = embed_batch(small_E, small_ds.images).astype(np.float64)
    labels = np.array(small_ds.labels)
    same, cross = [], []
    for i in range(len(e)):
        for j in range(i):
            (same if labels[i] == labels[j] else cross).append(np.abs(e[i] - e[j]).mean())
    assert np.mean(same) < np.mean(cross)


def test_default_dataset_trains_to_high_accuracy():
    from puface.datasets import SynthIdentitySpec, generate_synthetic, split
    from puface.extractor import ExtractorConfig

    ds = split(generate_synthetic(SynthIdentitySpec()), 0.7, 0)
    assert train_extractor(ds, ExtractorConfig()).meta["train_accuracy"] > 0.95


def test_two_separable_identities_1nn(small_ds):
    from puface.extractor import ExtractorConfig
    from puface.recognition import predict_batch, train_1nn

    two = small_ds.subset(small_ds.identities[:2])
    E = train_extractor(two, ExtractorConfig(image_size=16, channels=(8, 16), embedding_dim=8, pool_grid=2,
                                             epochs=20, batch_size=8))
    pred = predict_batch(train_1nn(E, two), two.test_images())
    assert np.mean(np.array(pred) == np.array(two.test_labels())) > 0.9
