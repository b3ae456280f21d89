"""Train SANet and the no-alignment baseline on the default synthetic set and compare CMC.

    python scripts/ablation.py --out runs/ablation [--epochs N]
"""

import argparse
import json
import logging
from dataclasses import replace

from sanet.experiments import ABLATION_TRAIN, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--epochs", type=int, default=ABLATION_TRAIN.epochs)
    p.add_argument("--seed", type=int, default=ABLATION_TRAIN.seed)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    train = replace(ABLATION_TRAIN, epochs=args.epochs, seed=args.seed)
    results = run_ablation(args.out, train=train, progress=True)
    table = {tag: {"CMC-1": r.rank1, "CMC-5": r.cmc[4], "dim": r.embedding_dim,
                   "spread_before": r.spread_before, "spread_after": r.spread_after,
                   "train_seconds": round(r.train_seconds, 1)} for tag, r in results.items()}
    print(json.dumps(table, indent=1))
    gap = results["sanet"].rank1 - results["baseline"].rank1
    print(f"SANet - baseline CMC-1: {gap:+.4f}")


if __name__ == "__main__":
    main()
