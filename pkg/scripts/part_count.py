"""Part-count ablation: train with M = 2 and M = 4 strips per axis and report dims and CMC.

    python scripts/part_count.py --out runs/parts [--epochs N]
"""

import argparse
import json
import logging
from dataclasses import replace

from sanet.data import generate_dataset
from sanet.experiments import ABLATION_SPEC, ABLATION_TRAIN, ablation_configs, train_and_evaluate


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/parts")
    p.add_argument("--epochs", type=int, default=ABLATION_TRAIN.epochs)
    p.add_argument("--parts", type=int, nargs="+", default=[2, 4])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    dataset = generate_dataset(ABLATION_SPEC)
    rows = {}
    for m in args.parts:
        model_cfg, train_cfg = ablation_configs(True, parts_per_branch=m,
                                                train=replace(ABLATION_TRAIN, epochs=args.epochs))
        r = train_and_evaluate(f"M{m}", dataset, model_cfg, train_cfg, f"{args.out}/M{m}", progress=True)
        rows[m] = {"dim": r.embedding_dim, "expected_dim": model_cfg.embedding_dim,
                   "CMC-1": r.rank1, "CMC-5": r.cmc[4]}
    print(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
