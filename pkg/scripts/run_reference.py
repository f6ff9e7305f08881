"""Run the seeded synthetic reference experiment and print the results table.

    python scripts/run_reference.py --out runs/reference [--epochs 80]

Writes data/, store/, runs/<variant>/, table.csv, report.json and timing.json
under --out. Single-threaded, so table.csv is bitwise reproducible.
"""

import argparse
import logging

from dape.config import reference_config
from dape.experiment import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reference", help="experiment directory")
    ap.add_argument("--epochs", type=int, default=80, help="training epochs per variant")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_experiment(reference_config(args.epochs), args.out)
    print(res["table"].read_text(), end="")
    for t in res["timings"]:
        print(f"# {t.job}: {t.cpu_seconds:.0f} s CPU")


if __name__ == "__main__":
    main()
