"""Compare five-fold AUROC on the synthetic fixture with and without drug-gene zero padding."""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

from drgt.dataset import prepare
from drgt.fixture import make_synthetic_fixture
from drgt.graph import GraphOptions
from drgt.model import ModelConfig
from drgt.pipeline import run_random_mask_cv

BENCH = ModelConfig(hidden=(256, 64, 32), num_layers=2, heads=4, epochs=300, lr=1e-3)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=BENCH.epochs)
    ap.add_argument("--noise", default="low")
    ap.add_argument("--output", type=Path, default=Path("zero_padding.tsv"))
    args = ap.parse_args()

    data = prepare(make_synthetic_fixture(40, 30, 60, seed=args.seed, noise=args.noise).bundle, "classification")
    cfg = replace(BENCH, epochs=args.epochs, seed=args.seed)
    rows = []
    for name, padding in (("with_padding", True), ("without_padding", False)):
        res = run_random_mask_cv(data, cfg, seed=args.seed, graph_options=GraphOptions(dg_zero_padding=padding))
        mean, std = res.summary("classification")
        rows.append((name, mean, std, res.folds[0].graph.num_edges))
        print(f"{name}: AUROC {mean:.4f} +- {std:.4f}", file=sys.stderr, flush=True)
    with open(args.output, "w") as fh:
        fh.write("configuration\tauroc_mean\tauroc_std\tedges\n")
        for name, mean, std, edges in rows:
            fh.write(f"{name}\t{mean:.4f}\t{std:.4f}\t{edges}\n")
    verdict = "holds" if rows[0][1] >= rows[1][1] else "does not hold"
    print(f"padding >= no padding {verdict} on this fixture; written to {args.output}")


if __name__ == "__main__":
    main()
