"""Bound curves for the linear-regression and classification case studies.

Thin wrapper around ``pacoh-lab bounds`` with the configs in ``configs/``.
Writes ``<out>/blr/bounds.csv`` and ``<out>/logreg/bounds.csv``.

    python scripts/bound_curves.py --out results
"""
import argparse
import sys
from pathlib import Path

from pacoh_lab.cli import main as cli_main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    args = p.parse_args()
    for env in ("blr", "logreg"):
        code = cli_main(["bounds", "--config", str(CONFIGS / f"bounds_{env}.json"),
                         "--seed", str(args.seed), "--out", str(Path(args.out) / env)])
        if code:
            sys.exit(code)
        print((Path(args.out) / env / "bounds.csv").read_text())


if __name__ == "__main__":
    main()
