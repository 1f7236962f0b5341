#!/usr/bin/env python3
"""Write a synthetic Gaussian-blob dataset as CSV (features f0.., column ``label``).

Handy for exercising the CSV data path of a config without real data::

    python3 scripts/make_blobs_csv.py data/blobs.csv --n-per-class 400 --dim 16
"""

import argparse
from pathlib import Path

from hwnas.data import save_csv, synth_blobs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--n-per-class", type=int, default=200)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--classes", type=int, default=5)
    ap.add_argument("--separation", type=float, default=6.0)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(synth_blobs(a.n_per_class, a.dim, a.classes, a.separation, a.seed), out)
    print(out)


if __name__ == "__main__":
    main()
