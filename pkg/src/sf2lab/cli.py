"""``sf2lab`` command-line interface.

Failures exit non-zero with a single ``error[<category>]: <message>`` line on
stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as E
from .checks import GRAD_CHECK_LOSSES, random_grad_checks
from .config import describe_defaults, load_config
from .data import (
    read_embeddings,
    read_scores,
    read_trials,
    read_utterances,
    write_embeddings,
    write_scores,
    write_trials,
    write_utterances,
    make_trials,
)
from .errors import InvalidConfig, MissingId, Sf2Error
from .model import load_checkpoint, named_loss, save_checkpoint
from .train import (
    ABLATION_GRID,
    TrainConfig,
    ablation_table,
    build_universe,
    lmft,
    noise_summary,
    noise_table,
    run_ablation,
    run_noise_study,
    train,
)

GRAD_TOL = 1e-6
COMPARE_SYSTEMS = "angproto,softmax,asoftmax,am,aam,sphereface2-a,sphereface2-m,sphereface2"


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def _out_dir(path):
    if path is None:
        return None
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(out, name, text):
    if out is not None:
        (out / name).write_text(text, encoding="utf-8")


def cmd_gen_data(a):
    cfg, _, _ = load_config(a.config, a.seed)
    u = build_universe(cfg)
    out = _out_dir(a.out_dir)
    write_utterances(out / "train_utts.txt", u.train)
    write_utterances(out / "unseen_utts.txt", u.unseen)
    ev = cfg.evaluation
    write_trials(out / "trials_O.txt", make_trials(u.unseen, ev.n_target, ev.n_nontarget, cfg.seed))
    if ev.hard_set:
        write_trials(out / "trials_H.txt", make_trials(u.unseen, ev.n_target, ev.n_nontarget, cfg.seed, hard=True))
    print(f"wrote {len(u.train)} training and {len(u.unseen)} unseen utterances to {out}")


def _metrics_rows(name, metrics, scoring):
    suffix = "_asnorm" if scoring == "asnorm" else ""
    return name, {
        s: {"eer": m["eer" + suffix], "mindcf": m["mindcf" + suffix], "p_target": m["p_target"]}
        for s, m in metrics.items()
    }


def cmd_train(a):
    cfg, _, _ = load_config(a.config, a.seed)
    rec = train(cfg)
    out = _out_dir(a.out_dir)
    if out is not None:
        save_checkpoint(rec.checkpoint, out / "model.ckpt")
    _write(out, "run.txt", rec.to_text())
    text, _ = E.report([_metrics_rows(cfg.loss.label, rec.metrics, "raw")], note="raw cosine scoring")
    print(text, end="")


def cmd_extract(a):
    ckpt = load_checkpoint(a.checkpoint)
    utts = read_utterances(a.utts)
    emb = ckpt.model.embed(utts.features)
    write_embeddings(a.out, dict(zip(utts.utt_ids, emb)))
    print(f"wrote {len(utts)} embeddings to {a.out}")


def cmd_score(a):
    emb = read_embeddings(a.embeddings)
    trials = read_trials(a.trials)
    st = E.score_trials(emb, trials)
    if a.cohort is not None:
        cohort = np.stack(list(read_embeddings(a.cohort).values()))
        st = E.asnorm(st, trials, emb, cohort, a.top_n)
    write_scores(a.out, trials.enroll, trials.test, st.scores)
    print(f"wrote {len(trials)} scores to {a.out}")


def cmd_metrics(a):
    enroll, test, scores = read_scores(a.scores)
    trials = read_trials(a.trials)
    label = {(e, t): y for e, t, y in zip(trials.enroll, trials.test, trials.is_target)}
    try:
        labels = np.array([label[(e, t)] for e, t in zip(enroll, test)], dtype=bool)
    except KeyError as exc:
        raise MissingId(f"score pair {exc.args[0]} not in trial list") from None
    st = E.ScoredTrials(scores, labels)
    eer, thr = E.eer(st)
    dcf, dthr = E.min_dcf(st, E.DcfParams(a.p_target, a.c_miss, a.c_fa))
    print(f"EER {100 * eer:.3f}%  minDCF(p_target={a.p_target:g}) {dcf:.3f}  trials {len(st.scores)}")


def cmd_grad_check(a):
    names = GRAD_CHECK_LOSSES if a.loss == "all" else [a.loss]
    worst = 0.0
    for name in names:
        err = random_grad_checks(name, a.trials, a.seed, a.eps)
        worst = max(worst, err)
        print(f"{name:14s} max_rel_error {err:.3e}  {'PASS' if err <= GRAD_TOL else 'FAIL'}")
    return 0 if worst <= GRAD_TOL else 1


def cmd_sweep(a):
    base, _, cells = load_config(a.config, a.seed)
    if a.grid is not None:
        _, _, cells = load_config(a.grid, a.seed)
    if not cells:
        if a.grid is not None:
            raise InvalidConfig(f"{a.grid}: no [cell...] sections")
        cells = ABLATION_GRID
    if base.loss.name != "sphereface2":
        base = replace(base, loss=named_loss("sphereface2"))
    results = run_ablation(cells, base, jobs=a.jobs)
    sets = ("O", "H") if base.evaluation.hard_set else ("O",)
    text, csv_text = ablation_table(results, sets)
    out = _out_dir(a.out_dir)
    _write(out, "ablation.txt", text)
    _write(out, "ablation.csv", csv_text)
    print(text, end="")


def cmd_noise_study(a):
    base, _, _ = load_config(a.config, a.seed)
    seeds = list(range(base.seed, base.seed + a.n_seeds))
    cells = run_noise_study(a.proportions, a.losses, seeds, base, jobs=a.jobs)
    text, csv_text = noise_table(cells)
    summary = noise_summary(cells)
    lines = ["# mean relative EER degradation (A-snorm disabled)"]
    lines += [f"{loss} @ {100 * p:g}%: {v:.4f}" for (loss, p), v in summary.items()]
    out = _out_dir(a.out_dir)
    _write(out, "noise.txt", text + "\n".join(lines) + "\n")
    _write(out, "noise.csv", csv_text)
    print(text, end="")
    print("\n".join(lines))


def cmd_lmft(a):
    ckpt = load_checkpoint(a.checkpoint)
    cfg = TrainConfig.from_dict(ckpt.config)
    _, lcfg, _ = load_config(a.config, cfg.seed)
    if a.margin is not None:
        lcfg = replace(lcfg, margin_override=a.margin)
    rec = lmft(ckpt, cfg, lcfg)
    out = _out_dir(a.out_dir)
    if out is not None:
        save_checkpoint(rec.checkpoint, out / "model_lmft.ckpt")
    _write(out, "run_lmft.txt", rec.to_text())
    text, _ = E.report([_metrics_rows(f"{cfg.loss.label} + LM-FT", rec.metrics, "raw")], note="raw cosine scoring")
    print(text, end="")


def cmd_compare(a):
    base, lcfg, _ = load_config(a.config, a.seed)
    seeds = list(range(base.seed, base.seed + a.n_seeds))
    rows = []
    lm_runs = []
    for name in a.systems:
        runs = []
        for s in seeds:
            cfg = replace(base, loss=named_loss(name), seed=s)
            rec = train(cfg)
            runs.append(rec.metrics)
            if a.lmft and name == "sphereface2":
                lm_runs.append(lmft(rec.checkpoint, cfg, lcfg).metrics)
        rows.append(_metrics_rows(name, _mean_metrics(runs), a.scoring))
        if a.lmft and name == "sphereface2":
            rows.append(_metrics_rows("  + LM-FT", _mean_metrics(lm_runs), a.scoring))
    note = f"{'A-snorm' if a.scoring == 'asnorm' else 'raw cosine'} scoring, mean over seeds {seeds}"
    text, csv_text = E.report(rows, note=note)
    out = _out_dir(a.out_dir)
    _write(out, "compare.txt", text)
    _write(out, "compare.csv", csv_text)
    print(text, end="")


def _mean_metrics(runs):
    out = {}
    for s in runs[0]:
        out[s] = {k: float(np.mean([r[s][k] for r in runs])) for k in runs[0][s]}
    return out


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(
        prog="sf2lab",
        description="Loss-function lab for open-set verification.",
        epilog="Config file keys and defaults:\n" + describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    def seeded(sp):
        sp.add_argument("--config", default=None, help="sectioned key=value config file")
        sp.add_argument("--seed", type=int, default=None, help="random seed (required here or in the config)")

    sp = add("gen-data", cmd_gen_data, "generate the synthetic universe and trial lists")
    seeded(sp)
    sp.add_argument("--out-dir", required=True, help="output directory")

    sp = add("train", cmd_train, "train one system and evaluate it on unseen speakers")
    seeded(sp)
    sp.add_argument("--out-dir", default=None, help="write model.ckpt and run.txt here")

    sp = add("extract", cmd_extract, "embed an utterance file with a checkpoint")
    sp.add_argument("--checkpoint", required=True, help="model checkpoint")
    sp.add_argument("--utts", required=True, help="utterance file")
    sp.add_argument("--out", required=True, help="embedding file to write")

    sp = add("score", cmd_score, "cosine-score a trial list, optionally with A-snorm")
    sp.add_argument("--embeddings", required=True, help="embedding file")
    sp.add_argument("--trials", required=True, help="trial file")
    sp.add_argument("--out", required=True, help="score file to write")
    sp.add_argument("--cohort", default=None, help="embedding file used as the A-snorm cohort")
    sp.add_argument("--top-n", type=int, default=20, help="A-snorm top-N")

    sp = add("metrics", cmd_metrics, "EER and minDCF from score and trial files")
    sp.add_argument("--scores", required=True, help="score file")
    sp.add_argument("--trials", required=True, help="trial file")
    sp.add_argument("--p-target", type=float, default=0.01, help="target prior for minDCF")
    sp.add_argument("--c-miss", type=float, default=1.0, help="miss cost")
    sp.add_argument("--c-fa", type=float, default=1.0, help="false-alarm cost")

    sp = add("grad-check", cmd_grad_check, "finite-difference check of analytic loss gradients")
    sp.add_argument("--loss", default="sphereface2", choices=list(GRAD_CHECK_LOSSES) + ["all"], help="loss to check")
    sp.add_argument("--trials", type=int, default=100, help="random configurations")
    sp.add_argument("--seed", type=int, required=True, help="random seed")
    sp.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")

    sp = add("sweep", cmd_sweep, "SphereFace2 hyperparameter ablation (lambda, t, s, m)")
    seeded(sp)
    sp.add_argument("--grid", default=None, help="config file with [cell...] sections; default: built-in 10-row grid")
    sp.add_argument("--jobs", type=int, default=1, help="parallel cells")
    sp.add_argument("--out-dir", default=None, help="write ablation.txt/.csv here")

    sp = add("noise-study", cmd_noise_study, "label-noise robustness study")
    seeded(sp)
    sp.add_argument("--losses", type=_csv_list(str), default=["aam", "sphereface2"], help="losses to compare")
    sp.add_argument("--proportions", type=_csv_list(float), default=[0.0, 0.3], help="noise proportions")
    sp.add_argument("--n-seeds", type=int, default=5, help="seeds seed..seed+n-1")
    sp.add_argument("--jobs", type=int, default=1, help="parallel cells")
    sp.add_argument("--out-dir", default=None, help="write noise.txt/.csv here")

    sp = add("lmft", cmd_lmft, "large-margin fine-tuning of a trained checkpoint")
    sp.add_argument("--checkpoint", required=True, help="checkpoint from `train`")
    sp.add_argument("--config", default=None, help="config file ([lmft] section is used)")
    sp.add_argument("--margin", type=float, default=None, help="override [lmft] margin_override")
    sp.add_argument("--out-dir", default=None, help="write model_lmft.ckpt and run_lmft.txt here")

    sp = add("compare", cmd_compare, "multi-system comparison table")
    seeded(sp)
    sp.add_argument("--systems", type=_csv_list(str), default=COMPARE_SYSTEMS.split(","), help="loss names")
    sp.add_argument("--n-seeds", type=int, default=1, help="seeds seed..seed+n-1")
    sp.add_argument("--lmft", action="store_true", help="add a SphereFace2 + LM-FT row")
    sp.add_argument("--scoring", choices=["raw", "asnorm"], default="raw", help="score normalization")
    sp.add_argument("--out-dir", default=None, help="write compare.txt/.csv here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except Sf2Error as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
