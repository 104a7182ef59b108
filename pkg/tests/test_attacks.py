import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from puface.attacks import (
    AttackConfig, cloak_identity, fawkes_cloak, fawkes_objective, gaussian_blur, gaussian_kernel, lowkey_cloak,
    lowkey_objective,
)
from puface.core import to_tensor
from puface.extractor import ExtractorModel, embed_batch

CFG = AttackConfig(epsilon=0.05, steps=8)


def _double(m):
    return ExtractorModel(m.config, copy.deepcopy(m.net).double())


def test_kernel_normalised_and_symmetric():
    k = gaussian_kernel(1.0, 2)
    assert k.shape == (5,)
    assert float(k.sum()) == pytest.approx(1.0, abs=1e-7)
    assert torch.equal(k, k.flip(0))


def test_blur_preserves_constants():
    x = torch.full((1, 3, 8, 8), 0.3)
    assert torch.allclose(gaussian_blur(x), x, atol=1e-6)


def test_fawkes_within_budget_and_reduces_objective(tiny_E, tiny_ds):
    x, t = tiny_ds.images[:4], tiny_ds.images[-4:]
    c = fawkes_cloak(x, t, tiny_E, CFG)
    assert c.shape == x.shape
    assert np.abs(c).max() <= np.float32(CFG.epsilon)
    assert (x + c).min() >= 0 and (x + c).max() <= 1
    xt, ct = to_tensor(x), to_tensor(c)
    with torch.no_grad():
        te = tiny_E.forward(to_tensor(t))
        before = fawkes_objective(tiny_E, xt, torch.zeros_like(xt), te)
        after = fawkes_objective(tiny_E, xt, ct, te)
    assert (after <= before).all()


def test_lowkey_within_budget_and_increases_objective(tiny_E, tiny_ds):
    x = tiny_ds.images[:4]
    c = lowkey_cloak(x, [tiny_E], CFG)
    assert np.abs(c).max() <= np.float32(CFG.epsilon)
    xt = to_tensor(x)
    with torch.no_grad():
        before = lowkey_objective([tiny_E], xt, torch.zeros_like(xt), CFG.blur_sigma)
        after = lowkey_objective([tiny_E], xt, to_tensor(c), CFG.blur_sigma)
    assert (after >= before).all()
    assert (after > before).any()


def test_single_image_and_empty_ensemble(tiny_E, tiny_ds):
    c = lowkey_cloak(tiny_ds.images[0], [tiny_E], CFG)
    assert c.shape == tiny_ds.images[0].shape
    with pytest.raises(ValueError):
        lowkey_cloak(tiny_ds.images[0], [], CFG)


def test_zero_steps_is_zero_cloak(tiny_E, tiny_ds):
    cfg = AttackConfig(steps=0)
    assert not lowkey_cloak(tiny_ds.images[:2], [tiny_E], cfg).any()
    assert not fawkes_cloak(tiny_ds.images[:2], tiny_ds.images[-2:], tiny_E, cfg).any()


@pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"steps": -1}, {"step_size": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_target_equal_to_input_gives_tiny_cloak(tiny_E, tiny_ds):
    x = tiny_ds.images[:3]
    c = fawkes_cloak(x, x, tiny_E, CFG)
    assert np.abs(c).max() < CFG.alpha


def test_lowkey_feature_shift_exceeds_intra_identity_spread(tiny_E, tiny_ds):
    ident = tiny_ds.identities[0]
    idx = tiny_ds.indices_of(ident)
    e = embed_batch(tiny_E, tiny_ds.images[idx])
    intra = np.mean([np.abs(e[i] - e[j]).mean() for i in range(len(e)) for j in range(len(e)) if i != j])
    c = lowkey_cloak(tiny_ds.images[idx], [tiny_E], AttackConfig())
    shift = np.abs(embed_batch(tiny_E, np.clip(tiny_ds.images[idx] + c, 0, 1)) - e).mean()
    assert shift > 3 * intra


def test_monotone_objective_over_random_runs(tiny_E, tiny_ds, rng):
    improved = 0
    for k in range(20):
        i, j = rng.choice(len(tiny_ds), 2, replace=False)
        x, t = tiny_ds.images[i:i + 1], tiny_ds.images[j:j + 1]
        c = fawkes_cloak(x, t, tiny_E, AttackConfig(epsilon=0.05, steps=5, seed=k))
        with torch.no_grad():
            te = tiny_E.forward(to_tensor(t))
            before = float(fawkes_objective(tiny_E, to_tensor(x), torch.zeros_like(to_tensor(x)), te))
            after = float(fawkes_objective(tiny_E, to_tensor(x), to_tensor(c), te))
        assert after <= before
        improved += after < before
    assert improved >= 19


@settings(max_examples=15, deadline=None)
@given(st.floats(0.001, 0.1), st.integers(1, 4), st.integers(0, 1000))
def test_budget_holds_exactly(tiny_E, tiny_ds, eps, steps, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((2, 16, 16, 3)).astype(np.float32)
    cfg = AttackConfig(epsilon=eps, steps=steps, step_size=eps)
    for c in (fawkes_cloak(x, x[::-1], tiny_E, cfg), lowkey_cloak(x, [tiny_E], cfg)):
        assert np.abs(c).max() <= np.float32(eps)
        assert (x + c).min() >= 0 and (x + c).max() <= 1


def test_cloak_identity_scope_and_determinism(tiny_E, tiny_ds):
    attacker = tiny_ds.identities[1]
    for attack in ("fawkes", "lowkey"):
        out = cloak_identity(tiny_ds, attacker, attack, [tiny_E], CFG)
        changed = np.flatnonzero((out.images != tiny_ds.images).any(axis=(1, 2, 3)))
        assert set(changed) <= set(tiny_ds.indices_of(attacker, "train"))
        assert len(changed) > 0
        delta = np.abs(out.images.astype(np.float64) - tiny_ds.images)
        assert delta.max() <= CFG.epsilon + 1e-7
        idx = tiny_ds.indices_of(attacker, "train")
        assert 0 < (delta[idx] ** 2).mean() <= CFG.epsilon ** 2
        assert out.meta["attack"]["attack"] == attack and out.meta["attack"]["epsilon"] == CFG.epsilon
        again = cloak_identity(tiny_ds, attacker, attack, [tiny_E], CFG)
        assert np.array_equal(again.images, out.images)


def test_fawkes_targets_are_other_identities(tiny_E, tiny_ds):
    from puface.attacks import fawkes_targets

    idx = tiny_ds.indices_of(tiny_ds.identities[0], "train")
    picks = fawkes_targets(tiny_ds, idx, np.random.default_rng(0))
    assert all(tiny_ds.labels[p] != tiny_ds.identities[0] for p in picks)


def test_unknown_inputs(tiny_E, tiny_ds):
    with pytest.raises(ValueError):
        cloak_identity(tiny_ds, "nobody", "fawkes", [tiny_E], CFG)
    with pytest.raises(ValueError):
        cloak_identity(tiny_ds, tiny_ds.identities[0], "glaze", [tiny_E], CFG)


def _fd_check(fn, c, rng, probes=20, h=1e-6):
    c = c.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(c), c)
    for _ in range(probes):
        v = torch.from_numpy(rng.standard_normal(c.shape))
        with torch.no_grad():
            fd = float((fn(c + h * v) - fn(c - h * v)) / (2 * h))
        an = float((g * v).sum())
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


def test_attack_objective_gradients_match_finite_differences(tiny_E, tiny_ds, rng):
    m = _double(tiny_E)
    x = torch.from_numpy(0.2 + 0.6 * tiny_ds.images[:2].astype(np.float64)).permute(0, 3, 1, 2).contiguous()
    c = torch.from_numpy(rng.uniform(-0.02, 0.02, x.shape))
    with torch.no_grad():
        target = m.forward(x.flip(0))
    _fd_check(lambda c: fawkes_objective(m, x, c, target).sum(), c, rng)
    _fd_check(lambda c: lowkey_objective([m], x, c, 1.0).sum(), c, rng)
