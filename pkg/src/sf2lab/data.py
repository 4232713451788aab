"""Synthetic open-set speaker universe, samplers, label noise, trials and file I/O.

Each utterance is ``l2_normalize(prototype + noise)`` with isotropic Gaussian
noise of variance ``noise_scale**2 / kappa`` per coordinate. Training speakers
are named ``trNNNN`` and unseen speakers ``unNNNN``, so the two id sets can
never collide.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import Rng, l2_normalize
from .errors import Infeasible, InvalidConfig, ParseError

FLOAT_FMT = "{:.9g}"


@dataclass
class UtteranceSet:
    utt_ids: list
    speaker_ids: list
    features: np.ndarray

    def __post_init__(self):
        n = len(self.utt_ids)
        if len(self.speaker_ids) != n or self.features.shape[0] != n:
            raise InvalidConfig("utterance ids, speaker ids and features must align")
        if len(set(self.utt_ids)) != n:
            raise InvalidConfig("utterance ids must be unique")

    def __len__(self):
        return len(self.utt_ids)

    def subset(self, idx) -> "UtteranceSet":
        idx = np.asarray(idx, dtype=int)
        return UtteranceSet(
            [self.utt_ids[i] for i in idx], [self.speaker_ids[i] for i in idx], self.features[idx]
        )

    def speakers(self) -> list:
        """Distinct speaker ids in first-appearance order."""
        return list(dict.fromkeys(self.speaker_ids))

    def label_array(self, speakers=None):
        """Integer labels (index into ``speakers``) for every utterance."""
        speakers = speakers if speakers is not None else self.speakers()
        index = {s: i for i, s in enumerate(speakers)}
        return np.array([index[s] for s in self.speaker_ids], dtype=np.int64)

    def by_speaker(self) -> dict:
        out: dict = {}
        for i, s in enumerate(self.speaker_ids):
            out.setdefault(s, []).append(i)
        return out

    def feature_map(self) -> dict:
        return {u: self.features[i] for i, u in enumerate(self.utt_ids)}

    def equals(self, other, atol=0.0) -> bool:
        return (
            self.utt_ids == other.utt_ids
            and self.speaker_ids == other.speaker_ids
            and self.features.shape == other.features.shape
            and bool(np.allclose(self.features, other.features, rtol=0, atol=atol) if atol else np.array_equal(self.features, other.features))
        )


@dataclass
class SpeakerUniverse:
    prototypes: np.ndarray
    train_speakers: list
    unseen_speakers: list
    kappa: float
    train: UtteranceSet
    unseen: UtteranceSet

    @property
    def d_feat(self):
        return self.prototypes.shape[1]


def gen_universe(
    K_train: int,
    K_unseen: int,
    d_feat: int,
    kappa: float,
    utts_per_speaker: int | Sequence[int],
    seed: int,
    noise_scale: float = 1.0,
) -> SpeakerUniverse:
    """Sample speaker prototypes uniformly on the sphere and noisy utterances around them.

    ``noise_scale`` multiplies the noise draws without changing them, so
    ``noise_scale=0.5`` yields the same utterances pulled halfway toward their
    prototypes (used for cleaner fine-tuning data).
    """
    if K_train < 2 or K_unseen < 0 or d_feat < 4 or not kappa > 0 or noise_scale < 0:
        raise InvalidConfig(
            f"need K_train >= 2, K_unseen >= 0, d_feat >= 4, kappa > 0; got "
            f"K_train={K_train}, K_unseen={K_unseen}, d_feat={d_feat}, kappa={kappa}"
        )
    K = K_train + K_unseen
    if np.isscalar(utts_per_speaker):
        counts = [int(utts_per_speaker)] * K
    else:
        counts = [int(c) for c in utts_per_speaker]
        if len(counts) != K:
            raise InvalidConfig("need one utterance count per speaker")
    if min(counts) < 1:
        raise InvalidConfig("every speaker needs at least one utterance")

    rng = Rng(seed)
    protos = l2_normalize(rng.split("prototypes").gen.standard_normal((K, d_feat)))
    std = noise_scale / np.sqrt(kappa)
    names = [f"tr{i:04d}" for i in range(K_train)] + [f"un{i:04d}" for i in range(K_unseen)]

    parts = []
    for k, name in enumerate(names):
        z = rng.split("noise", k).gen.standard_normal((counts[k], d_feat))
        feats = l2_normalize(protos[k] + std * z)
        ids = [f"{name}-u{j:03d}" for j in range(counts[k])]
        parts.append((ids, [name] * counts[k], feats))

    def collect(sl):
        chunk = parts[sl]
        return UtteranceSet(
            [u for p in chunk for u in p[0]],
            [s for p in chunk for s in p[1]],
            np.concatenate([p[2] for p in chunk]) if chunk else np.zeros((0, d_feat)),
        )

    return SpeakerUniverse(
        prototypes=protos,
        train_speakers=names[:K_train],
        unseen_speakers=names[K_train:],
        kappa=float(kappa),
        train=collect(slice(0, K_train)),
        unseen=collect(slice(K_train, K)),
    )


def inject_label_noise(labels, p: float, K_train: int, seed: int):
    """Reassign exactly round(p·n) labels to a uniformly drawn different class.

    Returns ``(corrupted_labels, mask)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig(f"noise proportion must be in [0, 1], got {p}")
    n = labels.size
    k = int(np.floor(p * n + 0.5))
    mask = np.zeros(n, dtype=bool)
    out = labels.copy()
    if k == 0:
        return out, mask
    if K_train < 2:
        raise InvalidConfig("label noise needs at least two classes")
    gen = Rng(seed).split("label-noise").gen
    idx = np.sort(gen.choice(n, size=k, replace=False))
    shift = gen.integers(1, K_train, size=k)
    out[idx] = (labels[idx] + shift) % K_train
    mask[idx] = True
    return out, mask


@dataclass
class TrialSet:
    enroll: list
    test: list
    is_target: np.ndarray

    def __len__(self):
        return len(self.enroll)

    def __eq__(self, other):
        return (
            isinstance(other, TrialSet)
            and self.enroll == other.enroll
            and self.test == other.test
            and np.array_equal(self.is_target, other.is_target)
        )


def _draw_pairs(gen, all_pairs_count, draw_fn, n):
    """Distinct draws while the pool lasts, repeats once it is exhausted."""
    seen = set()
    out = []
    while len(out) < n and len(seen) < all_pairs_count:
        pair = draw_fn()
        if pair not in seen:
            seen.add(pair)
            out.append(pair)
    while len(out) < n:
        out.append(draw_fn())
    return out


def make_trials(utts: UtteranceSet, n_target: int, n_nontarget: int, seed: int, hard: bool = False) -> TrialSet:
    """Target and non-target verification trials over ``utts``.

    With ``hard=True`` non-target pairs come only from the 10% most similar
    speaker pairs (cosine of speaker-mean features).
    """
    if n_target < 1 or n_nontarget < 1:
        raise InvalidConfig("need at least one target and one non-target trial")
    groups = utts.by_speaker()
    spk = list(groups)
    multi = [s for s in spk if len(groups[s]) >= 2]
    if not multi:
        raise Infeasible("no speaker has two utterances; target trials impossible")
    if len(spk) < 2:
        raise Infeasible("need two speakers for non-target trials")
    gen = Rng(seed).split("trials", "hard" if hard else "plain").gen

    weights = np.array([len(groups[s]) * (len(groups[s]) - 1) / 2 for s in multi])
    n_tar_pairs = int(weights.sum())
    probs = weights / weights.sum()

    def draw_target():
        s = multi[gen.choice(len(multi), p=probs)]
        i, j = gen.choice(len(groups[s]), size=2, replace=False)
        a, b = groups[s][min(i, j)], groups[s][max(i, j)]
        return (a, b)

    if hard:
        means = l2_normalize(np.stack([utts.features[groups[s]].mean(axis=0) for s in spk]))
        sim = means @ means.T
        iu = np.triu_indices(len(spk), k=1)
        order = np.argsort(-sim[iu], kind="stable")
        keep = order[: max(1, int(np.ceil(0.1 * order.size)))]
        spk_pairs = [(spk[iu[0][q]], spk[iu[1][q]]) for q in keep]
    else:
        spk_pairs = None
    n_non_pairs = (
        sum(len(groups[a]) * len(groups[b]) for a, b in spk_pairs)
        if hard
        else (len(utts) ** 2 - sum(len(g) ** 2 for g in groups.values())) // 2
    )

    def draw_nontarget():
        if hard:
            a, b = spk_pairs[gen.integers(len(spk_pairs))]
            i = groups[a][gen.integers(len(groups[a]))]
            j = groups[b][gen.integers(len(groups[b]))]
        else:
            while True:
                i, j = (int(v) for v in gen.integers(len(utts), size=2))
                if utts.speaker_ids[i] != utts.speaker_ids[j]:
                    break
        return (min(i, j), max(i, j))

    tar = _draw_pairs(gen, n_tar_pairs, draw_target, n_target)
    non = _draw_pairs(gen, n_non_pairs, draw_nontarget, n_nontarget)
    pairs = [(a, b, True) for a, b in tar] + [(a, b, False) for a, b in non]
    order = gen.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    return TrialSet(
        [utts.utt_ids[a] for a, _, _ in pairs],
        [utts.utt_ids[b] for _, b, _ in pairs],
        np.array([t for _, _, t in pairs], dtype=bool),
    )


def batch_sampler_classification(features, labels, batch_size: int, seed: int, epoch: int = 0) -> Iterator:
    """One epoch of shuffled (features, labels) batches; the last batch may be short."""
    if batch_size < 1:
        raise InvalidConfig("batch_size must be >= 1")
    n = len(labels)
    perm = Rng(seed).split("cls-batches", epoch).gen.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        yield features[idx], labels[idx]


def batch_sampler_proto(features, labels, N: int, M: int, seed: int, epoch: int = 0) -> Iterator:
    """One epoch of prototypical batches.

    Yields ``(features, labels)`` with N*M rows ordered speaker-major: rows
    ``k*M .. k*M+M-1`` are M distinct utterances of one of N distinct speakers.
    """
    labels = np.asarray(labels)
    groups: dict = {}
    for i, lab in enumerate(labels.tolist()):
        groups.setdefault(lab, []).append(i)
    eligible = sorted(s for s, g in groups.items() if len(g) >= M)
    if N < 2 or M < 2 or len(eligible) < N:
        raise Infeasible(f"need >= {N} speakers with >= {M} utterances each (have {len(eligible)})")
    gen = Rng(seed).split("proto-batches", epoch).gen
    n_batches = max(1, len(labels) // (N * M))
    for _ in range(n_batches):
        chosen = gen.choice(len(eligible), size=N, replace=False)
        idx = []
        for c in chosen:
            g = groups[eligible[c]]
            idx.extend(g[i] for i in gen.choice(len(g), size=M, replace=False))
        idx = np.array(idx)
        yield features[idx], labels[idx]


# -- file formats -----------------------------------------------------------


def _fmt_vec(v) -> str:
    return " ".join(FLOAT_FMT.format(float(x)) for x in v)


def _records(path) -> Iterator:
    """Yield (line_no, byte_offset, fields) for data lines, LF or CRLF."""
    data = Path(path).read_bytes()
    offset = 0
    for line_no, raw in enumerate(data.split(b"\n"), start=1):
        start = offset
        offset += len(raw) + 1
        text = raw.rstrip(b"\r")
        try:
            line = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError("invalid UTF-8", path=path, line=line_no, offset=start) from e
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield line_no, start, line


def _floats(text, path, line_no, offset):
    try:
        return [float(x) for x in text.split()]
    except ValueError as e:
        raise ParseError(f"bad number: {e}", path=path, line=line_no, offset=offset) from None


def write_utterances(path, utts: UtteranceSet):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, s, f in zip(utts.utt_ids, utts.speaker_ids, utts.features):
            fh.write(f"{u}\t{s}\t{_fmt_vec(f)}\n")


def read_utterances(path) -> UtteranceSet:
    ids, spk, feats = [], [], []
    for line_no, off, line in _records(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", path=path, line=line_no, offset=off)
        vec = _floats(fields[2], path, line_no, off)
        if feats and len(vec) != len(feats[0]):
            raise ParseError("inconsistent feature dimension", path=path, line=line_no, offset=off)
        ids.append(fields[0])
        spk.append(fields[1])
        feats.append(vec)
    d = len(feats[0]) if feats else 0
    return UtteranceSet(ids, spk, np.array(feats, dtype=float).reshape(len(ids), d))


def write_embeddings(path, emb: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in emb.items():
            fh.write(f"{u}\t{_fmt_vec(v)}\n")


def read_embeddings(path) -> dict:
    out = {}
    dim = None
    for line_no, off, line in _records(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", path=path, line=line_no, offset=off)
        vec = np.array(_floats(fields[1], path, line_no, off))
        if dim is not None and vec.size != dim:
            raise ParseError("inconsistent embedding dimension", path=path, line=line_no, offset=off)
        dim = vec.size
        out[fields[0]] = vec
    return out


def write_trials(path, trials: TrialSet):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e, t, y in zip(trials.enroll, trials.test, trials.is_target):
            fh.write(f"{e} {t} {int(y)}\n")


def read_trials(path) -> TrialSet:
    enroll, test, lab = [], [], []
    for line_no, off, line in _records(path):
        fields = line.split()
        if len(fields) != 3 or fields[2] not in ("0", "1"):
            raise ParseError("expected 'enroll test {0|1}'", path=path, line=line_no, offset=off)
        enroll.append(fields[0])
        test.append(fields[1])
        lab.append(fields[2] == "1")
    return TrialSet(enroll, test, np.array(lab, dtype=bool))


def write_scores(path, enroll, test, scores):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e, t, s in zip(enroll, test, scores):
            fh.write(f"{e} {t} {FLOAT_FMT.format(float(s))}\n")


def read_scores(path):
    """Returns ``(enroll, test, scores)``."""
    enroll, test, scores = [], [], []
    for line_no, off, line in _records(path):
        fields = line.split()
        if len(fields) != 3:
            raise ParseError("expected 'enroll test score'", path=path, line=line_no, offset=off)
        enroll.append(fields[0])
        test.append(fields[1])
        scores.append(_floats(fields[2], path, line_no, off)[0])
    return enroll, test, np.array(scores, dtype=float)
