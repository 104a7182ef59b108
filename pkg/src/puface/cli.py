"""Command-line surface: ``puface <command> [flags]``.

Every command accepts ``--config FILE``, an INI file whose ``[DEFAULT]``
section and ``[<command>]`` section supply flag values (keys use the long flag
name, dashes or underscores). Precedence: command-line flags, then the config
file, then built-in defaults. Exit codes: 0 ok, 1 usage, 2 missing input,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, cloak_identity
from .baselines import MagnetConfig, deflect_dataset, desk_deflection_params, reform_dataset, train_magnet_reformer
from .datasets import IdentityDataset, SynthIdentitySpec, export_directory, generate_synthetic, load_directory, split, to_uint8
from .evaluation import (
    ExperimentReport, attack_success_rate, normal_accuracy, pca_diagnostic, plot_pca, write_pca_csv,
    write_reports_jsonl,
)
from .extractor import ExtractorConfig, ExtractorModel, embed_batch, train_extractor
from .purifier import PurifierConfig, PurifierModel, purify_dataset
from .purifier_training import PurifierTrainConfig, make_fawkes_pairs, train_purifier
from .recognition import FINETUNE_DEFAULTS, HeadConfig, RecognitionModel, train_recognizer

log = logging.getLogger("puface")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3
ATTACK_SIDECAR = "attack.json"


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers -----------------------------------------------------------------

def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing {what}: {p}")
    return p


def _required(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise UsageError(f"--{name} is required")


def _fresh_dir(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and (not p.is_dir() or any(p.iterdir())):
        if not force:
            raise UsageError(f"output {p} exists and is not empty (use --force)")
        shutil.rmtree(p) if p.is_dir() else p.unlink()
    return p


def _fresh_file(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UsageError(f"output {p} exists (use --force)")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _flags(args) -> dict:
    """The full resolved flag set recorded into every artifact."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _provenance(args) -> dict:
    return {"cli": {"command": args.command, "flags": _flags(args)}}


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _or(value, default):
    return default if value is None else value


def _names(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _load_data(path, image_size: int) -> IdentityDataset:
    return load_directory(_need(path, "data"), image_size)


def _ensure_split(ds: IdentityDataset, args) -> IdentityDataset:
    return ds if ds.is_split else split(ds, args.train_fraction, args.split_seed)


def _load_extractors(paths: list[str], what: str) -> list[ExtractorModel]:
    return [ExtractorModel.load(_need(p, what)) for p in paths]


def _print_outputs(*paths):
    for p in paths:
        print(p)


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    _required(args, "out")
    spec = SynthIdentitySpec(
        num_identities=args.identities, images_per_identity=args.per_identity, image_size=args.image_size,
        jitter_scale=args.jitter_scale, identity_scale=args.identity_scale, seed=args.seed,
    )
    spec.validate()
    out = _fresh_dir(args.out, args.force)
    ds = split(generate_synthetic(spec), args.train_fraction, args.split_seed)
    export_directory(ds, out, extra=_provenance(args))
    _print_outputs(out)
    return EXIT_OK


def cmd_attack(args) -> int:
    _required(args, "out", "attacker")
    ds = _ensure_split(_load_data(args.data, args.image_size), args)
    if args.attacker not in ds.identities:
        raise UsageError(f"unknown attacker {args.attacker!r}; known: {', '.join(ds.identities)}")
    models = _load_extractors(_names(args.models or ""), "models")
    if not models:
        raise UsageError("--models needs at least one extractor checkpoint")
    out = _fresh_dir(args.out, args.force)
    cfg = AttackConfig(epsilon=args.epsilon, steps=args.steps, step_size=args.step_size, seed=args.seed)
    cloaked = cloak_identity(ds, args.attacker, args.attack, models, cfg)
    # PNGs hold 8 bits: truncate each delta toward zero so the stored cloak
    # never leaves the eps ball (rounding could overshoot by half a level).
    nat8 = to_uint8(ds.images).astype(np.int16)
    delta = np.trunc((cloaked.images.astype(np.float64) - nat8 / 255.0) * 255.0).astype(np.int16)
    pixels = np.clip(nat8 + delta, 0, 255).astype(np.uint8)
    sidecar = {"attack": args.attack, "epsilon": args.epsilon, "steps": args.steps, "seed": args.seed,
               "attacker": args.attacker, "step_size": cfg.alpha, **_provenance(args)}
    export_directory(cloaked, out, images_u8=pixels, extra=_provenance(args))
    (out / ATTACK_SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    _print_outputs(out, out / ATTACK_SIDECAR)
    return EXIT_OK


def cmd_train_extractor(args) -> int:
    _required(args, "out")
    ds = _ensure_split(_load_data(args.data, args.image_size), args)
    out = _fresh_file(args.out, args.force)
    cfg = ExtractorConfig(image_size=args.image_size, embedding_dim=args.embedding_dim, epochs=args.epochs,
                          batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)
    model = train_extractor(ds, cfg)
    model.save(out, extra_meta=_provenance(args))
    print(f"train accuracy {model.meta.get('train_accuracy', float('nan')):.4f}")
    _print_outputs(out)
    return EXIT_OK


def cmd_train_purifier(args) -> int:
    _required(args, "out")
    ds = _load_data(args.data, args.image_size)
    F_model = ExtractorModel.load(_need(args.extractor, "extractor"))
    pair_models = [ExtractorModel.load(_need(path, "pair-extractor")) for path in args.pair_extractor] or [F_model]
    out = _fresh_file(args.out, args.force)
    pairs = make_fawkes_pairs(ds, pair_models, AttackConfig(epsilon=args.epsilon, steps=args.steps, seed=args.seed))
    tcfg = PurifierTrainConfig(alpha=args.alpha, lam=args.lam, learning_rate=args.lr, epochs=args.epochs,
                               batch_size=args.batch_size, seed=args.seed)
    mcfg = PurifierConfig(depth=args.depth, features=args.features, seed=args.seed)
    model = train_purifier(pairs, F_model, tcfg, mcfg)
    model.save(out, extra_meta=_provenance(args))
    last = model.meta["log"][-1]
    print(f"final loss {last['total']:.6f} (image {last['image_loss']:.6f}, feature {last['feature_loss']:.6f})")
    _print_outputs(out)
    return EXIT_OK


def cmd_train_recognizer(args) -> int:
    _required(args, "out")
    ds = _ensure_split(_load_data(args.data, args.image_size), args)
    E = ExtractorModel.load(_need(args.backbone, "backbone"))
    out = _fresh_file(args.out, args.force)
    base = FINETUNE_DEFAULTS if args.kind == "finetune" else HeadConfig()
    cfg = replace(base, **{k: v for k, v in (("epochs", args.epochs), ("learning_rate", args.lr)) if v is not None},
                  seed=args.seed)
    model = train_recognizer(args.kind, E, ds, cfg)
    model.save(out, extra_meta=_provenance(args))
    _print_outputs(out)
    return EXIT_OK


def _export_defended(args, src: IdentityDataset, defended: IdentityDataset, out: Path, extra: dict):
    meta = dict(src.meta)
    meta.pop("skipped", None)
    defended = IdentityDataset(defended.images, defended.labels, defended.names, defended.train_idx,
                               defended.test_idx, meta)
    export_directory(defended, out, extra={**_provenance(args), **extra})
    sidecar = Path(args.data) / ATTACK_SIDECAR
    if sidecar.exists():  # keep the attack record alongside the defended copy
        shutil.copyfile(sidecar, out / ATTACK_SIDECAR)


def cmd_purify(args) -> int:
    _required(args, "out")
    ds = _ensure_split(_load_data(args.data, args.image_size), args)
    model = PurifierModel.load(_need(args.purifier, "purifier"))
    out = _fresh_dir(args.out, args.force)
    _export_defended(args, ds, purify_dataset(model, ds), out, {"defense": "puface"})
    _print_outputs(out)
    return EXIT_OK


def cmd_defend(args) -> int:
    _required(args, "out")
    ds = _ensure_split(_load_data(args.data, args.image_size), args)
    extra = {"defense": args.method}
    if args.method == "magnet":
        if args.reformer:
            model = PurifierModel.load(_need(args.reformer, "reformer"))
        else:
            pool = _load_data(_need(args.pool, "pool"), args.image_size)
            model = train_magnet_reformer(pool.images, MagnetConfig(noise_sigma=args.noise_sigma, epochs=args.epochs,
                                                                    seed=args.seed))
        out = _fresh_dir(args.out, args.force)
        defended = reform_dataset(model, ds)
    else:
        k, w = desk_deflection_params(ds.image_size)
        k, w = args.deflections or k, args.window or w
        extra.update(deflections=k, window=w)
        out = _fresh_dir(args.out, args.force)
        defended = deflect_dataset(ds, k, w, args.sigma, args.seed)
    _export_defended(args, ds, defended, out, extra)
    _print_outputs(out)
    return EXIT_OK


def _attacker_for(args, data: Path) -> str | None:
    if args.attacker:
        return args.attacker
    sidecar = data / ATTACK_SIDECAR
    if sidecar.exists():
        return json.loads(sidecar.read_text())["attacker"]
    return None


def cmd_evaluate(args) -> int:
    data = _need(args.data, "data")
    ds = _ensure_split(load_directory(data, args.image_size), args)
    model = RecognitionModel.load(_need(args.recognizer, "recognizer"))
    attacker = _attacker_for(args, data) or ds.identities[0]
    if attacker not in ds.identities:
        raise UsageError(f"unknown attacker {attacker!r}")
    ref = load_directory(_need(args.natural, "natural"), args.image_size) if args.natural else ds
    if ref.names != ds.names:
        raise UsageError("--natural must hold the same files as --data")
    idx = ds.train_idx
    is_att = np.array([ds.labels[i] == attacker for i in idx])
    F_model = ExtractorModel.load(_need(args.extractor, "extractor")) if args.extractor else model.backbone
    f_nat, f_def = embed_batch(F_model, ref.images[idx]), embed_batch(F_model, ds.images[idx])

    def mean_or_zero(values):
        return float(np.mean(values)) if values.size else 0.0

    sq = ((ds.images[idx].astype(np.float64) - ref.images[idx]) ** 2).mean(axis=(1, 2, 3))
    ab = np.abs(f_def.astype(np.float64) - f_nat).mean(axis=1)
    attack = "none"
    if (data / ATTACK_SIDECAR).exists():
        attack = json.loads((data / ATTACK_SIDECAR).read_text())["attack"]
    manifest = data / "manifest.json"
    defense = json.loads(manifest.read_text()).get("defense", "none") if manifest.exists() else "none"
    report = ExperimentReport(
        defense=defense, attack=attack, model_kind=model.kind,
        normal_accuracy=normal_accuracy(model, attacker, ds),
        attack_success_rate=attack_success_rate(model, attacker, ds),
        image_distortion_natural=mean_or_zero(sq[~is_att]), image_distortion_cloaked=mean_or_zero(sq[is_att]),
        feature_loss_natural=mean_or_zero(ab[~is_att]), feature_loss_cloaked=mean_or_zero(ab[is_att]),
        num_attackers=1, seed=args.seed, attackers=[attacker],
    )
    rows = [(k, f"{v:.6f}" if isinstance(v, float) else str(v)) for k, v in report.to_dict().items()
            if k not in ("per_attacker", "attackers")]
    rows.insert(0, ("attacker", attacker))
    width = max(len(k) for k, _ in rows)
    print("\n".join(f"{k.ljust(width)}  {v}" for k, v in rows))
    if args.out:
        out = _fresh_file(args.out, args.force)
        out.write_text(json.dumps({**report.to_dict(), **_provenance(args)}, indent=2, sort_keys=True))
        _print_outputs(out)
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    from .pipeline import ExperimentConfig, build_world, sweep

    _required(args, "out")
    alphas = args.alphas
    if not alphas:
        raise UsageError("--alphas must list at least one value")
    out = _fresh_file(args.out, args.force)
    base = ExperimentConfig()
    cfg = replace(
        base, data_seed=args.seed, num_attackers=args.num_attackers,
        eval_identities=args.identities, pool_identities=args.pool_identities,
        pretrain_identities=args.pretrain_identities,
        extractor=replace(base.extractor, epochs=_or(args.extractor_epochs, base.extractor.epochs)),
        purifier_train=replace(base.purifier_train, epochs=_or(args.epochs, base.purifier_train.epochs)),
    )
    world = build_world(cfg)
    rows = sweep(world, alphas, attack=args.attack, model_kind=args.kind)
    records = [{**row.to_dict(), **_provenance(args)} for row in rows]
    write_reports_jsonl(records, out)
    for row in rows:
        print(f"alpha {row.alpha:g}: success {row.report.attack_success_rate:.4f} "
              f"accuracy {row.report.normal_accuracy:.4f} natural mse {row.natural_mse:.6f}")
    _print_outputs(out)
    return EXIT_OK


def cmd_pca(args) -> int:
    _required(args, "out", "identities")
    ds = _ensure_split(_load_data(args.data, args.image_size), args)
    E = ExtractorModel.load(_need(args.backbone, "backbone"))
    cloaked = purified = None
    if args.cloaked:
        cloaked = load_directory(_need(args.cloaked, "cloaked"), args.image_size)
        if cloaked.names != ds.names:
            raise UsageError("--cloaked must hold the same files as --data")
    if args.purifier:
        model = PurifierModel.load(_need(args.purifier, "purifier"))
        purified = purify_dataset(model, _ensure_split(cloaked, args) if cloaked is not None else ds)
    result = pca_diagnostic(E, ds, _names(args.identities), cloaked, purified)
    out = _fresh_file(args.out, args.force)
    write_pca_csv(result, out)
    outputs = [out]
    if args.plot:
        outputs.append(plot_pca(result, _fresh_file(args.plot, args.force)))
    print(f"explained variance {result.explained_variance[0]:.6f} {result.explained_variance[1]:.6f}")
    _print_outputs(*outputs)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data=True, out=True):
    p.add_argument("--config", help="INI file with [DEFAULT] / [<command>] flag values")
    if data:
        p.add_argument("--data", help="dataset directory (root/<identity>/<image>)")
    if out:
        p.add_argument("--out")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="puface", description="Cloak, purify and evaluate face-recognition poisoning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    _common(p, data=False)
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--jitter-scale", type=float, default=0.06)
    p.add_argument("--identity-scale", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("attack", help="cloak one identity's train images")
    _common(p)
    p.add_argument("--attack", choices=("fawkes", "lowkey"), default="lowkey")
    p.add_argument("--attacker")
    p.add_argument("--models", help="comma-separated extractor checkpoints (fawkes uses the first)")
    p.add_argument("--epsilon", type=float, default=0.06)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-size", type=float, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-extractor", help="train an embedding network")
    _common(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.set_defaults(func=cmd_train_extractor)

    p = sub.add_parser("train-purifier", help="train the purifier on cloaked pairs")
    _common(p)
    p.add_argument("--extractor", help="frozen feature extractor checkpoint for the feature loss")
    p.add_argument("--pair-extractor", type=_names, default=[],
                   help="comma-separated extractors cloaking the training pairs, round robin (default: --extractor)")
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--features", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=0.06)
    p.add_argument("--steps", type=int, default=40)
    p.set_defaults(func=cmd_train_purifier)

    p = sub.add_parser("train-recognizer", help="train a 1NN, linear or fine-tuned recognizer")
    _common(p)
    p.add_argument("--backbone")
    p.add_argument("--kind", choices=("one_nn", "linear", "finetune"), default="one_nn")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_recognizer)

    p = sub.add_parser("purify", help="purify a dataset's train images")
    _common(p)
    p.add_argument("--purifier")
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("defend", help="apply a baseline defense to train images")
    _common(p)
    p.add_argument("--method", choices=("magnet", "deflect"), default="deflect")
    p.add_argument("--reformer", help="trained reformer checkpoint (magnet)")
    p.add_argument("--pool", help="natural images to train a reformer on when --reformer is absent")
    p.add_argument("--noise-sigma", type=float, default=0.025)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--deflections", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--sigma", type=float, default=0.04)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("evaluate", help="score a recognizer on a dataset's natural test images")
    _common(p)
    p.add_argument("--recognizer")
    p.add_argument("--attacker", help="default: from the attack sidecar, else the first identity")
    p.add_argument("--natural", help="natural copy of --data for distortion metrics")
    p.add_argument("--extractor", help="feature extractor for feature losses (default: the backbone)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="amplification sweep on the synthetic world")
    _common(p, data=False)
    p.add_argument("--alphas", type=_floats, default=[1.0, 3.0, 5.0, 8.0, 10.0])
    p.add_argument("--attack", choices=("fawkes", "lowkey"), default="lowkey")
    p.add_argument("--kind", choices=("one_nn", "linear", "finetune"), default="one_nn")
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--pool-identities", type=int, default=100)
    p.add_argument("--pretrain-identities", type=int, default=100)
    p.add_argument("--num-attackers", type=int, default=10)
    p.add_argument("--epochs", type=int, default=None, help="purifier epochs (default: desk world setting)")
    p.add_argument("--extractor-epochs", type=int, default=None, help="default: desk world setting")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("pca", help="2-D PCA of embeddings (CSV, optional plot)")
    _common(p)
    p.add_argument("--backbone")
    p.add_argument("--identities", help="comma-separated identities to project")
    p.add_argument("--cloaked", help="cloaked copy of --data")
    p.add_argument("--purifier", help="purifier applied to the cloaked (or natural) train images")
    p.add_argument("--plot", help="optional PNG path")
    p.set_defaults(func=cmd_pca)
    return parser


def _apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    """Install config-file values as parser defaults so explicit flags win."""
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing config: {p}")
    ini = configparser.ConfigParser()
    try:
        ini.read(p)
    except configparser.Error as exc:
        raise UsageError(f"unreadable config {p}: {exc}") from exc
    values = dict(ini.defaults())
    if ini.has_section(command):
        values.update({k: v for k, v in ini.items(command)})
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            if ini.has_section(command) and ini.has_option(command, key) and key not in ini.defaults():
                raise UsageError(f"config key {key!r} is not a flag of {command}")
            continue  # [DEFAULT] keys may target other commands
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.choices is not None and raw not in action.choices:
            raise UsageError(f"config {key}={raw!r}: expected one of {sorted(action.choices)}")
        else:
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config {key}={raw!r}: {exc}") from exc
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.config:
            _apply_config(parser, args.command, args.config)
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
