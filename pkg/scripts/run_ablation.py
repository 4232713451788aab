"""SphereFace2 hyperparameter ablation (lambda, t, s, m) at desk scale.

    python3 scripts/run_ablation.py --seed 0 --jobs 1 --out results/ablation
"""

import argparse
from dataclasses import replace
from pathlib import Path

from sf2lab.train import ABLATION_GRID, TrainConfig, ablation_table, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--with-divergent", action="store_true", help="append an s=1e300 cell that overflows")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    grid = list(ABLATION_GRID)
    if args.with_divergent:
        grid.append(dict(s=1e300))
    results = run_ablation(grid, replace(TrainConfig(), seed=args.seed), jobs=args.jobs)
    text, csv_text = ablation_table(results)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text)
        (out / "ablation.csv").write_text(csv_text)


if __name__ == "__main__":
    main()
