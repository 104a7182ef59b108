"""Metrics, the attack -> defend -> train -> measure loop, the amplification
sweep and the PCA view of embeddings."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attacks import AttackConfig, cloak_identity
from .core import mse
from .datasets import IdentityDataset
from .extractor import ExtractorModel, embed_batch
from .recognition import HeadConfig, RecognitionModel, predict_batch, train_recognizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Defense:
    """A named transform applied to a batch of train images (N, H, W, 3)."""

    name: str
    apply: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.array(images, copy=True) if self.apply is None else self.apply(images)


NO_DEFENSE = Defense("none")


@dataclass
class ExperimentReport:
    defense: str
    attack: str
    model_kind: str
    normal_accuracy: float
    attack_success_rate: float
    image_distortion_natural: float
    image_distortion_cloaked: float
    feature_loss_natural: float
    feature_loss_cloaked: float
    num_attackers: int
    seed: int
    attackers: list[str] = field(default_factory=list)
    per_attacker: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("normal_accuracy", "attack_success_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_attackers < 1:
            raise ValueError("num_attackers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _test_predictions(m: RecognitionModel, ds: IdentityDataset, keep: Callable[[str], bool]):
    idx = [i for i in ds.test_idx if keep(ds.labels[i])]
    if not idx:
        return [], []
    return predict_batch(m, ds.images[idx]), [ds.labels[i] for i in idx]


def attacker_accuracy(m: RecognitionModel, attacker: str, ds: IdentityDataset) -> float:
    if attacker not in ds.identities:
        raise ValueError(f"unknown identity {attacker!r}")
    pred, true = _test_predictions(m, ds, lambda y: y == attacker)
    if not true:
        raise ValueError(f"identity {attacker!r} has no test images")
    return sum(p == t for p, t in zip(pred, true)) / len(true)


def attack_success_rate(m: RecognitionModel, attacker: str, ds: IdentityDataset) -> float:
    """Fraction of the attacker's natural test images that are misidentified."""
    return 1.0 - attacker_accuracy(m, attacker, ds)


def normal_accuracy(m: RecognitionModel, attacker: str, ds: IdentityDataset) -> float:
    """Top-1 accuracy over natural test images of everyone but the attacker."""
    pred, true = _test_predictions(m, ds, lambda y: y != attacker)
    if not true:
        raise ValueError("no test images of non-attacker identities")
    return sum(p == t for p, t in zip(pred, true)) / len(true)


def _mean_mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64)))) if len(a) else 0.0


def _mean_mse(a: np.ndarray, b: np.ndarray) -> float:
    return mse(a, b) if len(a) else 0.0


def sample_attackers(ds: IdentityDataset, num_attackers: int, seed: int) -> list[str]:
    ids = ds.identities
    if not 1 <= num_attackers <= len(ids):
        raise ValueError(f"num_attackers must lie in [1, {len(ids)}]")
    rng = np.random.default_rng(seed)
    return [ids[k] for k in rng.choice(len(ids), size=num_attackers, replace=False)]


def run_experiment(
    ds: IdentityDataset,
    attack: str,
    defense: Defense,
    model_kind: str,
    *,
    backbone: ExtractorModel,
    attack_models: Sequence[ExtractorModel] = (),
    feature_model: ExtractorModel | None = None,
    num_attackers: int = 5,
    seed: int = 0,
    attack_cfg: AttackConfig = AttackConfig(),
    head_cfg: HeadConfig | None = None,
    cache: dict | None = None,
) -> ExperimentReport:
    """Cloak each sampled attacker, defend all train images, train the
    recognizer, then score it on natural test images. Averages over attackers.

    ``cache`` (any dict) memoises cloaked datasets across calls.
    """
    if attack not in ("none", "fawkes", "lowkey"):
        raise ValueError(f"unknown attack {attack!r}")
    if attack != "none" and not attack_models:
        raise ValueError("attack_models are required to cloak")
    if not ds.is_split:
        raise ValueError("dataset must be split before running experiments")
    F_model = feature_model or backbone
    attackers = sample_attackers(ds, num_attackers, seed)
    rows = []
    for k, attacker in enumerate(attackers):
        cfg = replace(attack_cfg, seed=attack_cfg.seed + seed * 1000 + k)
        key = (attack, attacker, cfg, tuple(id(m) for m in attack_models), id(ds))
        if attack == "none":
            poisoned = ds
        elif cache is not None and key in cache:
            poisoned = cache[key]
        else:
            poisoned = cloak_identity(ds, attacker, attack, list(attack_models), cfg)
            if cache is not None:
                cache[key] = poisoned
        train_idx = poisoned.train_idx
        defended_train = defense(poisoned.images[train_idx])
        defended = poisoned.with_images(train_idx, defended_train)
        model = train_recognizer(model_kind, backbone, defended, head_cfg)
        acc = attacker_accuracy(model, attacker, ds)

        is_att = np.array([ds.labels[i] == attacker for i in train_idx])
        natural_train = ds.images[train_idx]
        f_nat = embed_batch(F_model, natural_train)
        f_def = embed_batch(F_model, defended_train)
        rows.append({
            "attacker": attacker,
            "attack_success_rate": 1.0 - acc,
            "normal_accuracy": normal_accuracy(model, attacker, ds),
            "image_distortion_natural": _mean_mse(defended_train[~is_att], natural_train[~is_att]),
            "image_distortion_cloaked": _mean_mse(defended_train[is_att], natural_train[is_att]),
            "feature_loss_natural": _mean_mae(f_def[~is_att], f_nat[~is_att]),
            "feature_loss_cloaked": _mean_mae(f_def[is_att], f_nat[is_att]),
        })
        log.info("%s/%s/%s attacker %s: success %.3f accuracy %.3f", attack, defense.name, model_kind,
                 attacker, rows[-1]["attack_success_rate"], rows[-1]["normal_accuracy"])
    means = {key: float(np.mean([r[key] for r in rows])) for key in rows[0] if key != "attacker"}
    return ExperimentReport(
        defense=defense.name, attack=attack, model_kind=model_kind, num_attackers=num_attackers, seed=seed,
        attackers=attackers, per_attacker=rows, **means,
    )


@dataclass
class SweepRow:
    alpha: float
    report: ExperimentReport
    natural_mse: float
    natural_feature_loss: float
    cloaked_mse: float
    cloaked_feature_loss: float
    train_log: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict()
        return d


def purified_losses(
    purify_fn: Callable[[np.ndarray], np.ndarray], F_model: ExtractorModel, naturals: np.ndarray, cloaked: np.ndarray
) -> dict[str, float]:
    """Image MSE and feature MAE of purified natural / purified cloaked images
    against their natural originals."""
    f_nat = embed_batch(F_model, naturals)
    pn, pc = purify_fn(naturals), purify_fn(cloaked)
    return {
        "natural_mse": mse(pn, naturals),
        "natural_feature_loss": _mean_mae(embed_batch(F_model, pn), f_nat),
        "cloaked_mse": mse(pc, naturals),
        "cloaked_feature_loss": _mean_mae(embed_batch(F_model, pc), f_nat),
    }


def alpha_sweep(
    alphas: Sequence[float],
    train_fn: Callable[[float], Callable[[np.ndarray], np.ndarray]],
    experiment_fn: Callable[[Defense], ExperimentReport],
    loss_fn: Callable[[Callable[[np.ndarray], np.ndarray]], dict[str, float]],
) -> list[SweepRow]:
    """One purifier per alpha: ``train_fn(alpha)`` returns a purify function,
    ``experiment_fn`` scores it as a defense, ``loss_fn`` measures the
    purified-image losses. :func:`puface.pipeline.sweep` wires these up."""
    if len(alphas) == 0:
        raise ValueError("alphas must be non-empty")
    rows = []
    for alpha in alphas:
        purify_fn = train_fn(float(alpha))
        report = experiment_fn(Defense(f"puface(alpha={alpha:g})", purify_fn))
        losses = loss_fn(purify_fn)
        rows.append(SweepRow(float(alpha), report, **losses, train_log=getattr(purify_fn, "train_log", [])))
    return rows


@dataclass
class PCAResult:
    points: np.ndarray  # (n, 2)
    identities: list[str]
    groups: list[str]
    components: np.ndarray  # (2, d)
    mean: np.ndarray
    explained_variance: np.ndarray  # (2,)


def _sign_fix(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for row in out:
        nz = np.flatnonzero(row)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    return out


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Top-2 principal components via SVD of the centred data."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 3:
        raise ValueError("PCA needs at least 3 points")
    mean = x.mean(0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = _sign_fix(vt[:2])
    var = (s[:2] ** 2) / (len(x) - 1)
    return (x - mean) @ comps.T, comps, mean, var


def pca_diagnostic(
    E: ExtractorModel,
    ds: IdentityDataset,
    identities: Sequence[str],
    cloaked_variant: IdentityDataset | None = None,
    purified_variant: IdentityDataset | None = None,
) -> PCAResult:
    """Project embeddings of the selected identities onto the top-2 PCs.

    Groups: ``train-natural``, ``train-cloaked`` (train images that differ in
    ``cloaked_variant``), ``train-purified`` and ``test-natural``.
    """
    if len(identities) < 2:
        raise ValueError("select at least 2 identities")
    missing = set(identities) - set(ds.identities)
    if missing:
        raise ValueError(f"unknown identities: {sorted(missing)}")
    imgs, ids, groups = [], [], []
    keep = set(identities)
    for i in ds.train_idx:
        y = ds.labels[i]
        if y not in keep:
            continue
        cloaked = cloaked_variant is not None and not np.array_equal(cloaked_variant.images[i], ds.images[i])
        imgs.append(cloaked_variant.images[i] if cloaked else ds.images[i])
        ids.append(y)
        groups.append("train-cloaked" if cloaked else "train-natural")
        if purified_variant is not None:
            imgs.append(purified_variant.images[i])
            ids.append(y)
            groups.append("train-purified")
    for i in ds.test_idx:
        if ds.labels[i] in keep:
            imgs.append(ds.images[i])
            ids.append(ds.labels[i])
            groups.append("test-natural")
    if len(imgs) < 3:
        raise ValueError("PCA needs at least 3 points")
    points, comps, mean, var = pca_2d(embed_batch(E, np.stack(imgs)))
    return PCAResult(points, ids, groups, comps, mean, var)


def write_pca_csv(result: PCAResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "identity", "group"])
        for (x, y), ident, group in zip(result.points, result.identities, result.groups):
            w.writerow([f"{x:.8f}", f"{y:.8f}", ident, group])
    return path


def plot_pca(result: PCAResult, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    markers = {"train-natural": "o", "train-cloaked": "x", "train-purified": "+", "test-natural": "^"}
    fig, ax = plt.subplots(figsize=(5, 5))
    colours = {ident: f"C{k}" for k, ident in enumerate(sorted(set(result.identities)))}
    for group, marker in markers.items():
        for ident, colour in colours.items():
            sel = [k for k, (g, i) in enumerate(zip(result.groups, result.identities)) if g == group and i == ident]
            if sel:
                ax.scatter(result.points[sel, 0], result.points[sel, 1], c=colour, marker=marker, s=18,
                           label=f"{ident} {group}")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


REPORT_FIELDS = [
    "defense", "attack", "model_kind", "normal_accuracy", "attack_success_rate",
    "image_distortion_natural", "image_distortion_cloaked", "feature_loss_natural", "feature_loss_cloaked",
    "num_attackers", "seed",
]


def write_reports_jsonl(records: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=float) + "\n")
    return path


def table_rows(reports: Sequence[ExperimentReport]) -> tuple[list[str], list[list[str]]]:
    """Defense rows x (model, attack) columns; each cell 'accuracy / success'."""
    columns = []
    for r in reports:
        col = f"{r.model_kind}:{r.attack}"
        if col not in columns:
            columns.append(col)
    defenses = list(dict.fromkeys(r.defense for r in reports))
    cells = {(r.defense, f"{r.model_kind}:{r.attack}"):
             f"{100 * r.normal_accuracy:.2f}% / {100 * r.attack_success_rate:.2f}%" for r in reports}
    return ["defense", *columns], [[d, *(cells.get((d, c), "") for c in columns)] for d in defenses]


def write_table_csv(reports: Sequence[ExperimentReport], path) -> Path:
    header, rows = table_rows(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def format_table(reports: Sequence[ExperimentReport]) -> str:
    header, rows = table_rows(reports)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
