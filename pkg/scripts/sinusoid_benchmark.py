"""Meta-learned versus vanilla priors on the sinusoid environment.

Runs PACOH-GP-MAP and PACOH-NN-SVGD over several seeds and writes one row
per (model, seed) plus the medians to ``<out>/sinusoid_benchmark.csv``.

    python scripts/sinusoid_benchmark.py --seeds 0 1 2 3 4 --out results
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from pacoh_lab.experiments import gp_map_benchmark, nn_svgd_benchmark, run_sinusoid_benchmark

COLUMNS = ["model", "seed", "pacoh_rmse", "pacoh_calib", "vanilla_rmse", "vanilla_calib", "train_seconds"]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--models", nargs="+", default=["gp", "bnn"], choices=["gp", "bnn"])
    p.add_argument("--out", default="results")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configs = {"gp": gp_map_benchmark(), "bnn": nn_svgd_benchmark()}
    rows = []
    for name in args.models:
        for seed in args.seeds:
            r = run_sinusoid_benchmark(configs[name], seed)
            rows.append({"model": name, **r})
            print(name, seed, {k: round(v, 4) for k, v in r.items() if k != "seed"}, flush=True)
        sel = [r for r in rows if r["model"] == name]
        med = {k: float(np.median([r[k] for r in sel])) for k in COLUMNS[2:]}
        print(f"{name} median", {k: round(v, 4) for k, v in med.items()}, flush=True)
    with open(out / "sinusoid_benchmark.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
