"""2-D PCA of backbone embeddings for two desk-world identities, one of them
cloaked (and optionally purified).

    python scripts/pca_figure.py --out results/pca.csv --plot results/pca.png [--attack lowkey] [--purify]
"""
import argparse
import logging

from puface.attacks import cloak_identity
from puface.evaluation import pca_diagnostic, plot_pca, write_pca_csv
from puface.pipeline import ExperimentConfig, build_world
from puface.purifier import purify_dataset


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--attack", choices=("fawkes", "lowkey"), default="lowkey")
    p.add_argument("--purify", action="store_true", help="add the purified cloaked train images")
    p.add_argument("--out", required=True)
    p.add_argument("--plot")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    world = build_world(ExperimentConfig())
    ds = world.dataset
    attacker, other = ds.identities[:2]
    cloaked = cloak_identity(ds, attacker, args.attack, world.attack_models, world.config.attack)
    purified = purify_dataset(world.train_puface(), cloaked) if args.purify else None
    result = pca_diagnostic(world.backbone, ds, [attacker, other], cloaked, purified)
    write_pca_csv(result, args.out)
    print(f"explained variance {result.explained_variance[0]:.4f} {result.explained_variance[1]:.4f}")
    if args.plot:
        plot_pca(result, args.plot)


if __name__ == "__main__":
    main()
