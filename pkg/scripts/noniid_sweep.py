"""Final accuracy of every method as the non-IID degree epsilon varies.

    python3 scripts/noniid_sweep.py [--config scripts/configs/noniid_sweep.json]
        [--epsilons 0.2,0.4,0.6] [--seeds 5] [--methods aflora,classic,...] [--out sweep.csv]
"""
import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from aflora.harness import METHODS, ExperimentConfig, run_experiment

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "configs" / "noniid_sweep.json")
    ap.add_argument("--epsilons", default="0.2,0.4,0.6")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--out", help="per-run CSV (method,epsilon,seed,accuracy)")
    args = ap.parse_args()

    base = ExperimentConfig.from_json(args.config)
    epsilons = [float(e) for e in args.epsilons.split(",")]
    methods = args.methods.split(",")
    rows = []
    for method in methods:
        for eps in epsilons:
            for seed in range(args.seeds):
                cfg = replace(base, method=method, epsilon=eps, partition="noniid", seed=seed).validate()
                rows.append((method, eps, seed, run_experiment(cfg)[-1].test_accuracy))

    print(f"{'method':10s}" + "".join(f"  eps={e:<5}" for e in epsilons))
    for method in methods:
        means = [np.mean([r[3] for r in rows if r[0] == method and r[1] == e]) for e in epsilons]
        print(f"{method:10s}" + "".join(f"  {m:9.4f}" for m in means))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "epsilon", "seed", "accuracy"])
            w.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
