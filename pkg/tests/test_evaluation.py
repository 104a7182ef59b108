import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from puface.attacks import AttackConfig
from puface.evaluation import (
    NO_DEFENSE, Defense, ExperimentReport, alpha_sweep, attack_success_rate, attacker_accuracy, format_table,
    normal_accuracy, pca_2d, pca_diagnostic, plot_pca, run_experiment, sample_attackers, table_rows, write_pca_csv,
    write_reports_jsonl, write_table_csv,
)
from puface.recognition import train_1nn


def test_metric_examples(small_E, small_ds, monkeypatch):
    import puface.evaluation as ev

    attacker = small_ds.identities[0]
    truth = {tuple(x.ravel()[:8]): y for x, y in zip(small_ds.images, small_ds.labels)}
    monkeypatch.setattr(ev, "predict_batch", lambda m, xs: [truth[tuple(x.ravel()[:8])] for x in xs])
    assert attack_success_rate(None, attacker, small_ds) == 0.0
    assert normal_accuracy(None, attacker, small_ds) == 1.0
    monkeypatch.setattr(ev, "predict_batch", lambda m, xs: ["nobody"] * len(xs))
    assert attack_success_rate(None, attacker, small_ds) == 1.0
    assert normal_accuracy(None, attacker, small_ds) == 0.0


def test_success_is_complement_of_attacker_accuracy(small_E, small_ds):
    m = train_1nn(small_E, small_ds)
    for ident in small_ds.identities:
        assert attack_success_rate(m, ident, small_ds) == 1.0 - attacker_accuracy(m, ident, small_ds)
    with pytest.raises(ValueError):
        attack_success_rate(m, "nobody", small_ds)


def test_sample_attackers(small_ds):
    a = sample_attackers(small_ds, 3, 7)
    assert a == sample_attackers(small_ds, 3, 7)
    assert len(set(a)) == 3 and set(a) <= set(small_ds.identities)
    with pytest.raises(ValueError):
        sample_attackers(small_ds, 0, 0)
    with pytest.raises(ValueError):
        sample_attackers(small_ds, 99, 0)


def test_report_validation():
    kw = dict(defense="none", attack="none", model_kind="one_nn", image_distortion_natural=0.0,
              image_distortion_cloaked=0.0, feature_loss_natural=0.0, feature_loss_cloaked=0.0, seed=0)
    with pytest.raises(ValueError):
        ExperimentReport(normal_accuracy=1.2, attack_success_rate=0.0, num_attackers=1, **kw)
    with pytest.raises(ValueError):
        ExperimentReport(normal_accuracy=1.0, attack_success_rate=0.0, num_attackers=0, **kw)


def test_clean_pipeline_baseline(small_E, small_ds):
    r = run_experiment(small_ds, "none", NO_DEFENSE, "one_nn", backbone=small_E, num_attackers=3)
    assert r.attack_success_rate <= 0.1 and r.normal_accuracy > 0.9
    assert r.image_distortion_natural == 0.0 and r.feature_loss_natural == 0.0


def test_experiment_is_deterministic(small_E, small_ds):
    kw = dict(backbone=small_E, attack_models=[small_E], num_attackers=1, seed=3,
              attack_cfg=AttackConfig(epsilon=0.05, steps=5))
    a = run_experiment(small_ds, "lowkey", NO_DEFENSE, "one_nn", **kw)
    b = run_experiment(small_ds, "lowkey", NO_DEFENSE, "one_nn", **kw)
    assert a.to_dict() == b.to_dict()
    assert 0 < a.image_distortion_cloaked <= 0.05 ** 2


def test_experiment_rejects_bad_names(small_E, small_ds):
    with pytest.raises(ValueError):
        run_experiment(small_ds, "glaze", NO_DEFENSE, "one_nn", backbone=small_E, attack_models=[small_E])
    with pytest.raises(ValueError):
        run_experiment(small_ds, "none", NO_DEFENSE, "svm", backbone=small_E)
    with pytest.raises(ValueError):
        run_experiment(small_ds, "lowkey", NO_DEFENSE, "one_nn", backbone=small_E)


def test_defense_is_applied_to_train_images_only(small_E, small_ds):
    seen = []

    def spy(x):
        seen.append(len(x))
        return x

    run_experiment(small_ds, "none", Defense("spy", spy), "one_nn", backbone=small_E, num_attackers=1)
    assert seen == [len(small_ds.train_idx)]


def test_alpha_sweep_wiring():
    calls = []

    def train_fn(alpha):
        calls.append(alpha)
        return lambda x: x

    def experiment_fn(defense):
        return ExperimentReport(defense.name, "fawkes", "one_nn", 1.0, 0.5, 0, 0, 0, 0, 1, 0)

    rows = alpha_sweep([1, 3, 5], train_fn, experiment_fn, lambda fn: {
        "natural_mse": 0.0, "natural_feature_loss": 0.0, "cloaked_mse": 0.0, "cloaked_feature_loss": 0.0})
    assert [r.alpha for r in rows] == [1.0, 3.0, 5.0] == calls
    assert rows[1].report.defense == "puface(alpha=3)"
    with pytest.raises(ValueError):
        alpha_sweep([], train_fn, experiment_fn, lambda fn: {})


def eig_oracle(x):
    """Top-2 eigenvectors of the sample covariance, sign-fixed like the implementation."""
    xc = x - x.mean(0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / (len(x) - 1))
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order].T
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if row[nz[0]] < 0:
            row *= -1
    return xc @ comps.T, comps, vals[order]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 40), st.integers(2, 12))
def test_pca_matches_covariance_eigensolver(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d)) * np.linspace(3, 0.5, d)
    points, comps, _, var = pca_2d(x)
    want_points, want_comps, want_var = eig_oracle(x)
    if want_var[1] - (np.linalg.eigvalsh(np.cov(x.T))[::-1][2] if d > 2 else -1) < 1e-6:
        return  # degenerate second component: the basis is not unique
    assert points.shape == (n, 2)
    for k in range(2):
        sign = np.sign(np.dot(comps[k], want_comps[k]))
        np.testing.assert_allclose(comps[k] * sign, want_comps[k], atol=1e-6)
        np.testing.assert_allclose(points[:, k] * sign, want_points[:, k], atol=1e-6)
    np.testing.assert_allclose(var, want_var, rtol=1e-6)
    assert var[0] >= var[1]


def test_pca_needs_three_points():
    with pytest.raises(ValueError):
        pca_2d(np.zeros((2, 4)))


def test_pca_diagnostic_groups_and_outputs(small_E, small_ds, tmp_path):
    from puface.attacks import cloak_identity

    ids = small_ds.identities[:2]
    cloaked = cloak_identity(small_ds, ids[0], "lowkey", [small_E], AttackConfig(epsilon=0.05, steps=3))
    res = pca_diagnostic(small_E, small_ds, ids, cloaked_variant=cloaked, purified_variant=cloaked)
    assert res.points.shape[1] == 2
    assert {"train-natural", "train-cloaked", "train-purified", "test-natural"} == set(res.groups)
    assert res.explained_variance[0] >= res.explained_variance[1]
    path = write_pca_csv(res, tmp_path / "pca.csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == len(res.points) and set(rows[0]) == {"x", "y", "identity", "group"}
    assert plot_pca(res, tmp_path / "pca.png").stat().st_size > 0
    with pytest.raises(ValueError):
        pca_diagnostic(small_E, small_ds, ids[:1])


def test_table_outputs(tmp_path):
    reports = [
        ExperimentReport("none", "fawkes", "one_nn", 0.99, 0.5, 0, 0, 0, 0, 1, 0),
        ExperimentReport("puface", "fawkes", "one_nn", 0.98, 0.1, 0, 0, 0, 0, 1, 0),
        ExperimentReport("puface", "lowkey", "linear", 0.97, 0.2, 0, 0, 0, 0, 1, 0),
    ]
    header, rows = table_rows(reports)
    assert header == ["defense", "one_nn:fawkes", "linear:lowkey"]
    assert rows[1] == ["puface", "98.00% / 10.00%", "97.00% / 20.00%"]
    text = format_table(reports)
    assert len({len(line) for line in text.splitlines()}) == 1  # aligned
    assert list(csv.reader(write_table_csv(reports, tmp_path / "t.csv").open()))[0] == header
    path = write_reports_jsonl([r.to_dict() for r in reports], tmp_path / "r.jsonl")
    assert [json.loads(line)["defense"] for line in path.open()] == ["none", "puface", "puface"]
