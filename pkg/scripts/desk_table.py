"""Defense comparison on the desk world: every defense against both attacks.

    python scripts/desk_table.py --out results/desk_table.csv [--model-kind one_nn]
"""
import argparse
import logging
import time
from dataclasses import replace

from puface.evaluation import format_table, write_table_csv
from puface.pipeline import ExperimentConfig, build_world


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", help="optional CSV path")
    p.add_argument("--model-kind", choices=("one_nn", "linear", "finetune"), default="one_nn")
    p.add_argument("--defenses", default="none,puface,magnet,deflect")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--epochs", type=int, help="purifier epochs")
    p.add_argument("--pool-identities", type=int)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig(seed=args.seed)
    if args.epsilon is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, epsilon=args.epsilon))
    train = {k: v for k, v in (("alpha", args.alpha), ("lam", args.lam), ("epochs", args.epochs)) if v is not None}
    cfg = replace(cfg, purifier_train=replace(cfg.purifier_train, **train))
    if args.pool_identities is not None:
        cfg = replace(cfg, pool_identities=args.pool_identities)
    t0 = time.time()
    world = build_world(cfg)
    logging.info("world built in %.0fs", time.time() - t0)
    reports = []
    for defense in args.defenses.split(","):
        for attack in ("lowkey", "fawkes"):
            t = time.time()
            reports.append(world.experiment(attack, defense, args.model_kind))
            logging.info("%s/%s done in %.0fs", defense, attack, time.time() - t)
    print(format_table(reports))
    if args.out:
        write_table_csv(reports, args.out)
    logging.info("total %.0fs", time.time() - t0)


if __name__ == "__main__":
    main()
