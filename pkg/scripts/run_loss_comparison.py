"""Train every loss at desk scale over several seeds and print the comparison table.

    python3 scripts/run_loss_comparison.py --seeds 0 1 2 3 4 --out results/compare
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from sf2lab.evaluation import report
from sf2lab.model import named_loss
from sf2lab.train import LmftConfig, TrainConfig, lmft, train

SYSTEMS = ["angproto", "softmax", "asoftmax", "am", "aam", "sphereface2-a", "sphereface2-m", "sphereface2"]


def summarize(runs, scoring):
    suffix = "_asnorm" if scoring == "asnorm" else ""
    return {
        s: {
            "eer": float(np.mean([r[s]["eer" + suffix] for r in runs])),
            "mindcf": float(np.mean([r[s]["mindcf" + suffix] for r in runs])),
            "p_target": runs[0][s]["p_target"],
        }
        for s in runs[0]
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--systems", nargs="+", default=SYSTEMS)
    ap.add_argument("--out", default=None, help="directory for text/CSV tables")
    args = ap.parse_args()

    runs = {name: [] for name in args.systems}
    lm_runs = []
    for name in args.systems:
        for seed in args.seeds:
            cfg = replace(TrainConfig(), loss=named_loss(name), seed=seed)
            rec = train(cfg)
            runs[name].append(rec.metrics)
            if name == "sphereface2":
                lm_runs.append(lmft(rec.checkpoint, cfg, LmftConfig()).metrics)
            print(f"{name} seed {seed}: O EER {100 * rec.metrics['O']['eer']:.3f}%", flush=True)
    if lm_runs:
        runs["sphereface2 + LM-FT"] = lm_runs

    for scoring in ("raw", "asnorm"):
        rows = [(name, summarize(r, scoring)) for name, r in runs.items()]
        text, csv_text = report(rows, note=f"{scoring} scoring, mean over seeds {args.seeds}")
        print(text)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"compare_{scoring}.txt").write_text(text)
            (out / f"compare_{scoring}.csv").write_text(csv_text)


if __name__ == "__main__":
    main()
