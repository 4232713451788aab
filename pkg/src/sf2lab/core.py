"""Numeric primitives shared by every other module.

Vectors and matrices are plain float64 numpy arrays. Hypersphere points are
ordinary arrays whose rows have unit L2 norm; ``is_unit`` checks that.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import NonFinite, ZeroVector

NORM_FLOOR = 1e-12
UNIT_TOL = 1e-6
# arccos'(z) diverges at z = +-1.
COS_CLAMP = 1.0 - 1e-12


def check_finite(x, what="value"):
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return x


def l2_normalize(v):
    """Scale ``v`` (or each row of a 2-D ``v``) to unit L2 norm.

    Raises:
        ZeroVector: if any norm is at or below 1e-12.
    """
    v = np.asarray(v, dtype=float)
    check_finite(v, "vector")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise ZeroVector("cannot normalize a vector with norm <= 1e-12")
    return v / norms


def is_unit(v, tol=UNIT_TOL):
    norms = np.linalg.norm(np.asarray(v, dtype=float), axis=-1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def cosine(u, v):
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        raise ZeroVector("cosine of a zero vector is undefined")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def clamp_cos(c):
    return np.clip(c, -COS_CLAMP, COS_CLAMP)


def softplus(x):
    """log(1 + exp(x)) in the overflow-free form max(x, 0) + log1p(exp(-|x|))."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logsumexp(a, axis=-1):
    a = np.asarray(a, dtype=float)
    mx = np.max(a, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Compare an analytic gradient with central finite differences.

    ``f`` maps an array to ``(value, grad)``. The relative error per
    coordinate is ``|a - n| / max(1, |a|, |n|)``; the maximum is returned.
    ``x`` may have any shape; every coordinate is perturbed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=float)
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=float).reshape(x.shape)
    check_finite(value, "f(x)")
    check_finite(analytic, "analytic gradient")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"f is non-finite around coordinate {i}")
        num_flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _label_key(labels) -> tuple[int, ...]:
    out = []
    for lab in labels:
        digest = hashlib.sha256(repr(lab).encode("utf-8")).digest()
        out.append(int.from_bytes(digest[:4], "little"))
    return tuple(out)


class Rng:
    """Seeded, splittable random stream backed by the counter-based Philox generator.

    ``split`` derives an independent child stream from string/int labels,
    so the stream a component sees depends only on (seed, labels), never on
    how much randomness other components consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + _label_key(labels))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
