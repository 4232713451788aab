"""Label-noise robustness: relative EER degradation of AAM vs SphereFace2.

    python3 scripts/run_noise_study.py --proportions 0.1 0.2 0.3 --seeds 0 1 2 3 4
"""

import argparse
from dataclasses import replace
from pathlib import Path

from sf2lab.train import TrainConfig, noise_summary, noise_table, run_noise_study


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--proportions", type=float, nargs="+", default=[0.1, 0.2, 0.3])
    ap.add_argument("--losses", nargs="+", default=["aam", "sphereface2"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cells = run_noise_study(args.proportions, args.losses, args.seeds, replace(TrainConfig(), seed=args.seeds[0]), args.jobs)
    text, csv_text = noise_table(cells)
    print(text)
    for (loss, p), v in noise_summary(cells).items():
        print(f"{loss:12s} noise {100 * p:4g}%  mean rel. degradation {v:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "noise.txt").write_text(text)
        (out / "noise.csv").write_text(csv_text)


if __name__ == "__main__":
    main()
