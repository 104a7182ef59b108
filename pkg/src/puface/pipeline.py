"""Desk-scale experiment harness: one seeded "world" holding the evaluation
identities, the purifier's training identities, a pretraining population
for the extractors, and every model the experiments need."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .attacks import AttackConfig
from .baselines import MagnetConfig, deflect_and_denoise, desk_deflection_params, train_magnet_reformer
from .datasets import IdentityDataset, SynthIdentitySpec, generate_synthetic, split
from .evaluation import (
    NO_DEFENSE, Defense, ExperimentReport, SweepRow, alpha_sweep, purified_losses, run_experiment,
)
from .extractor import ExtractorConfig, ExtractorModel, train_extractor
from .purifier import PurifierConfig, PurifierModel, purify_batch
from .purifier_training import PurifierTrainConfig, PurifierTrainPair, make_fawkes_pairs, train_purifier
from .recognition import HeadConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    eval_identities: int = 10
    images_per_identity: int = 20
    pool_identities: int = 100  # purifier training identities
    pool_images_per_identity: int = 10
    pretrain_identities: int = 100  # population E, F and the pair cloakers learn from
    pretrain_images_per_identity: int = 10
    image_size: int = 32
    jitter_scale: float = 0.06
    identity_scale: float = 0.2
    data_seed: int = 1
    train_fraction: float = 0.7
    split_seed: int = 0
    extractor: ExtractorConfig = ExtractorConfig(downsample="max", augment_noise=0.03, augment_blur=1.0)
    feature_extractor_seed: int = 101
    pair_extractor_seeds: tuple[int, ...] = (102, 103, 104, 105)
    extra_attack_seeds: tuple[int, ...] = ()
    attack: AttackConfig = AttackConfig()
    purifier: PurifierConfig = PurifierConfig()
    purifier_train: PurifierTrainConfig = PurifierTrainConfig(lam=0.1, learning_rate=1e-3, epochs=12)
    magnet: MagnetConfig = MagnetConfig(epochs=12)  # same data and epoch budget as the purifier
    deflect_k: int | None = None  # None: rescale 200 px @ 112x112 by area
    deflect_window: int | None = None  # None: rescale 10 px @ 112x112 by side
    wavelet_sigma: float = 0.04
    num_attackers: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class DeskWorld:
    config: ExperimentConfig
    dataset: IdentityDataset  # evaluation identities, split
    pool: IdentityDataset  # purifier training identities (disjoint)
    pretrain: IdentityDataset  # extractor training identities (disjoint)
    backbone: ExtractorModel  # E: recognition backbone
    feature_model: ExtractorModel  # F: frozen extractor for the feature loss
    pair_models: list[ExtractorModel]  # cloak the pool for purifier training pairs
    attack_models: list[ExtractorModel]
    cache: dict = field(default_factory=dict)

    def pairs(self) -> list[PurifierTrainPair]:
        if "pairs" not in self.cache:
            self.cache["pairs"] = make_fawkes_pairs(self.pool, self.pair_models, self.config.attack)
        return self.cache["pairs"]

    def train_puface(self, alpha: float | None = None, lam: float | None = None, **overrides) -> PurifierModel:
        cfg = self.config.purifier_train
        cfg = replace(cfg, alpha=cfg.alpha if alpha is None else alpha, lam=cfg.lam if lam is None else lam, **overrides)
        key = ("puface", cfg)
        if key not in self.cache:
            self.cache[key] = train_purifier(self.pairs(), self.feature_model, cfg, self.config.purifier)
        return self.cache[key]

    def train_magnet(self) -> PurifierModel:
        if "magnet" not in self.cache:
            self.cache["magnet"] = train_magnet_reformer(self.pool.images, self.config.magnet, self.config.purifier)
        return self.cache["magnet"]

    def deflect_params(self) -> tuple[int, int]:
        k, w = desk_deflection_params(self.config.image_size)
        return (self.config.deflect_k or k, self.config.deflect_window or w)

    def defense(self, name: str, **kwargs) -> Defense:
        if name == "none":
            return NO_DEFENSE
        if name == "puface":
            model = kwargs.get("model") or self.train_puface(kwargs.get("alpha"))
            return Defense("puface", lambda x: purify_batch(model, x))
        if name == "magnet":
            model = kwargs.get("model") or self.train_magnet()
            return Defense("magnet", lambda x: purify_batch(model, x))
        if name == "deflect":
            k, w = self.deflect_params()
            sigma, seed = self.config.wavelet_sigma, self.config.seed
            return Defense("deflect", lambda x: np.stack(
                [deflect_and_denoise(img, k, w, sigma, seed + i) for i, img in enumerate(x)]))
        raise ValueError(f"unknown defense {name!r}; expected none, puface, magnet or deflect")

    def experiment(self, attack: str, defense: Defense | str, model_kind: str = "one_nn",
                   head_cfg: HeadConfig | None = None, num_attackers: int | None = None) -> ExperimentReport:
        if isinstance(defense, str):
            defense = self.defense(defense)
        return run_experiment(
            self.dataset, attack, defense, model_kind,
            backbone=self.backbone, attack_models=self.attack_models, feature_model=self.feature_model,
            num_attackers=num_attackers or self.config.num_attackers, seed=self.config.seed,
            attack_cfg=self.config.attack, head_cfg=head_cfg, cache=self.cache,
        )

    def attacker_images(self, attack: str = "fawkes") -> tuple[np.ndarray, np.ndarray]:
        """(natural, cloaked) train images of the experiment's attackers."""
        from .evaluation import sample_attackers
        from .attacks import cloak_identity

        naturals, cloaked = [], []
        for k, attacker in enumerate(sample_attackers(self.dataset, self.config.num_attackers, self.config.seed)):
            cfg = replace(self.config.attack, seed=self.config.attack.seed + self.config.seed * 1000 + k)
            key = (attack, attacker, cfg, tuple(id(m) for m in self.attack_models), id(self.dataset))
            if key not in self.cache:
                self.cache[key] = cloak_identity(self.dataset, attacker, attack, self.attack_models, cfg)
            idx = self.dataset.indices_of(attacker, "train")
            naturals.append(self.dataset.images[idx])
            cloaked.append(self.cache[key].images[idx])
        return np.concatenate(naturals), np.concatenate(cloaked)


def build_world(cfg: ExperimentConfig = ExperimentConfig()) -> DeskWorld:
    """Generate one population split into three disjoint groups: evaluation
    identities, the purifier's training pool and a pretraining population.
    E, F and the pair cloakers are all trained on the pretraining population,
    so none of them has seen an evaluation or pool identity."""
    n_eval, n_pool, n_pre = cfg.eval_identities, cfg.pool_identities, cfg.pretrain_identities
    if n_pool < 2 or n_pre < 2:
        raise ValueError("pool_identities and pretrain_identities must be >= 2")
    per = max(cfg.images_per_identity, cfg.pool_images_per_identity, cfg.pretrain_images_per_identity)
    world = generate_synthetic(SynthIdentitySpec(
        num_identities=n_eval + n_pool + n_pre, images_per_identity=per, image_size=cfg.image_size,
        jitter_scale=cfg.jitter_scale, seed=cfg.data_seed, identity_scale=cfg.identity_scale,
    ))
    ids = world.identities
    dataset = split(_take(world.subset(ids[:n_eval]), cfg.images_per_identity), cfg.train_fraction, cfg.split_seed)
    pool = _take(world.subset(ids[n_eval:n_eval + n_pool]), cfg.pool_images_per_identity)
    pretrain = _take(world.subset(ids[n_eval + n_pool:]), cfg.pretrain_images_per_identity)
    ecfg = replace(cfg.extractor, image_size=cfg.image_size)
    log.info("training extractors on %d pretraining images", len(pretrain))
    backbone = train_extractor(pretrain, ecfg)
    feature_model = train_extractor(pretrain, replace(ecfg, seed=cfg.feature_extractor_seed))
    pair_models = [train_extractor(pretrain, replace(ecfg, seed=s)) for s in cfg.pair_extractor_seeds]
    extra = [train_extractor(pretrain, replace(ecfg, seed=s)) for s in cfg.extra_attack_seeds]
    return DeskWorld(cfg, dataset, pool, pretrain, backbone, feature_model, pair_models, [backbone, *extra])


def _take(ds: IdentityDataset, per_identity: int) -> IdentityDataset:
    keep = []
    for identity in ds.identities:
        keep.extend(ds.indices_of(identity)[:per_identity])
    keep = sorted(keep)
    return IdentityDataset(ds.images[keep], tuple(ds.labels[i] for i in keep), tuple(ds.names[i] for i in keep),
                           meta=dict(ds.meta))


def sweep(world: DeskWorld, alphas: Sequence[float], attack: str = "fawkes", model_kind: str = "one_nn") -> list[SweepRow]:
    """Amplification sweep: success rate and purified-image losses per alpha."""
    naturals, cloaked = world.attacker_images(attack)

    def train_fn(alpha):
        model = world.train_puface(alpha)
        fn = lambda x: purify_batch(model, x)  # noqa: E731
        fn.train_log = model.meta.get("log", [])
        return fn

    return alpha_sweep(
        alphas, train_fn,
        lambda d: world.experiment(attack, d, model_kind),
        lambda fn: purified_losses(fn, world.feature_model, naturals, cloaked),
    )
