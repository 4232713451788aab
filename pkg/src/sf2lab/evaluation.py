"""Cosine trial scoring, A-snorm, EER, minDCF and comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import check_finite
from .data import TrialSet
from .errors import DegenerateLabels, InvalidConfig, MissingId, ZeroVariance


@dataclass
class ScoredTrials:
    scores: np.ndarray
    is_target: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape or self.scores.ndim != 1 or self.scores.size < 1:
            raise InvalidConfig("scores and labels must be equal-length non-empty vectors")
        check_finite(self.scores, "scores")

    def split(self):
        tar = self.scores[self.is_target]
        non = self.scores[~self.is_target]
        if tar.size == 0 or non.size == 0:
            raise DegenerateLabels("need at least one target and one non-target trial")
        return tar, non


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1 or self.c_miss <= 0 or self.c_fa <= 0:
            raise InvalidConfig(f"invalid DCF parameters {self}")

    @property
    def norm(self):
        return min(self.c_miss * self.p_target, self.c_fa * (1 - self.p_target))


def _lookup(emb: dict, uid):
    try:
        return emb[uid]
    except KeyError:
        raise MissingId(f"no embedding for utterance {uid!r}") from None


def score_trials(emb: dict, trials: TrialSet) -> ScoredTrials:
    """Cosine score of every trial; embeddings are re-normalized defensively."""
    if len(trials) == 0:
        raise InvalidConfig("empty trial set")
    e = np.stack([_lookup(emb, u) for u in trials.enroll])
    t = np.stack([_lookup(emb, u) for u in trials.test])
    s = np.sum(e * t, axis=1) / (np.linalg.norm(e, axis=1) * np.linalg.norm(t, axis=1))
    return ScoredTrials(np.clip(s, -1.0, 1.0), trials.is_target.copy())


def _error_curves(st: ScoredTrials):
    """FAR and FRR at every distinct-score threshold plus +inf (accept if score >= θ)."""
    tar, non = st.split()
    tar = np.sort(tar)
    non = np.sort(non)
    thr = np.unique(st.scores)
    thr = np.append(thr, np.inf)
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, far, frr


def eer(st: ScoredTrials):
    """Equal error rate and its threshold.

    FAR - FRR starts at +1 (lowest threshold accepts everything) and ends at
    -1 (+inf rejects everything); the EER is the linear interpolation of the
    two curves across the first sign change.
    """
    thr, far, frr = _error_curves(st)
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0 or i == 0:
        return float(far[i]), float(thr[i])
    a = d[i - 1] / (d[i - 1] - d[i])
    rate = far[i - 1] + a * (far[i] - far[i - 1])
    if np.isinf(thr[i]):
        threshold = thr[i - 1]
    else:
        threshold = thr[i - 1] + a * (thr[i] - thr[i - 1])
    return float(rate), float(threshold)


def min_dcf(st: ScoredTrials, p: DcfParams = DcfParams()):
    """Normalized minimum detection cost and the (lowest) threshold attaining it."""
    thr, far, frr = _error_curves(st)
    thr = np.concatenate([[-np.inf], thr])
    far = np.concatenate([[1.0], far])
    frr = np.concatenate([[0.0], frr])
    dcf = (p.c_miss * p.p_target * frr + p.c_fa * (1 - p.p_target) * far) / p.norm
    k = int(np.argmin(dcf))
    return float(dcf[k]), float(thr[k])


def cohort_stats(cohort_scores, top_n: int):
    """Mean and population std of the top-N scores in each row."""
    cs = np.asarray(cohort_scores, dtype=float)
    if not 2 <= top_n <= cs.shape[-1]:
        raise InvalidConfig(f"need 2 <= topN <= cohort size ({cs.shape[-1]}), got {top_n}")
    top = -np.sort(-cs, axis=-1)[..., :top_n]
    mu = top.mean(axis=-1)
    sd = top.std(axis=-1)
    if np.any(sd < 1e-12):
        raise ZeroVariance("top-N cohort scores have zero variance")
    return mu, sd


def asnorm_scores(raw, enroll_cohort, test_cohort, top_n: int):
    """½((s - μ_e)/σ_e + (s - μ_t)/σ_t) with top-N statistics per side."""
    raw = np.asarray(raw, dtype=float)
    mu_e, sd_e = cohort_stats(enroll_cohort, top_n)
    mu_t, sd_t = cohort_stats(test_cohort, top_n)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


def asnorm(raw: ScoredTrials, trials: TrialSet, emb: dict, cohort, top_n: int) -> ScoredTrials:
    cohort = np.asarray(cohort, dtype=float)
    if cohort.ndim != 2 or cohort.shape[0] < top_n:
        raise InvalidConfig("cohort must be a (C, d) matrix with C >= topN")
    cohort = cohort / np.linalg.norm(cohort, axis=1, keepdims=True)
    ids = list(dict.fromkeys(trials.enroll + trials.test))
    E = np.stack([_lookup(emb, u) for u in ids])
    E = E / np.linalg.norm(E, axis=1, keepdims=True)
    mu, sd = cohort_stats(E @ cohort.T, top_n)
    pos = {u: i for i, u in enumerate(ids)}
    ei = np.array([pos[u] for u in trials.enroll])
    ti = np.array([pos[u] for u in trials.test])
    s = raw.scores
    norm = 0.5 * ((s - mu[ei]) / sd[ei] + (s - mu[ti]) / sd[ti])
    return ScoredTrials(norm, raw.is_target.copy())


# -- reporting --------------------------------------------------------------


def _table_columns(rows):
    if not rows:
        raise InvalidConfig("report needs at least one row")
    sets = list(rows[0][1])
    for name, metrics in rows:
        if list(metrics) != sets:
            raise InvalidConfig(f"row {name!r} has trial sets {list(metrics)}, expected {sets}")
    return sets


def report(rows, note: str | None = None):
    """Render ``[(system, {trial_set: {"eer": .., "mindcf": .., "p_target": ..}})]``.

    Returns ``(text_table, csv_text)``. EER is shown in percent.
    """
    sets = _table_columns(rows)
    header = ["System"]
    for s in sets:
        p = rows[0][1][s].get("p_target")
        header += [f"{s} EER%", f"{s} DCF{'' if p is None else f'@{p:g}'}"]
    body = []
    for name, metrics in rows:
        line = [name]
        for s in sets:
            m = metrics[s]
            line += _fmt_metric(m.get("eer"), 100.0, 3), _fmt_metric(m.get("mindcf"), 1.0, 4)
        body.append(line)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]

    def render(r):
        return "  ".join(cell.ljust(w) if c == 0 else cell.rjust(w) for c, (cell, w) in enumerate(zip(r, widths)))

    lines = []
    if note:
        lines.append(f"# {note}")
    lines.append(render(header))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend(render(r) for r in body)
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["system"]
    for s in sets:
        cols += [f"{s}_eer", f"{s}_mindcf"]
    writer.writerow(cols)
    for name, metrics in rows:
        out = [name]
        for s in sets:
            out += [_csv_num(metrics[s].get("eer")), _csv_num(metrics[s].get("mindcf"))]
        writer.writerow(out)
    return text, buf.getvalue()


def _fmt_metric(v, scale, digits):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    return f"{v * scale:.{digits}f}"


def _csv_num(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))
