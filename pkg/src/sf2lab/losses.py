"""Loss values and analytic gradients.

Each loss has a batched form (``*_batch``) used by the trainer, operating on
a ``(B, K)`` cosine or logit matrix and returning the batch-mean loss, and a
single-sample form matching the per-utterance definitions. The single-sample
forms are thin wrappers over the batched ones.

SphereFace2 margin types:

* ``C``: positive score ``g(cos θ_y) - m``, negative score ``g(cos θ_j) + m``.
* ``A``: positive score ``g(cos(θ_y + m))`` (arc margin, no additive term).
* ``M``: positive score ``g(cos(θ_y + m)) - m`` (both margins).

Negative scores are the same for all three types. The arc angle is capped at
π so the positive score never increases with θ_y.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import COS_CLAMP, check_finite, logsumexp, sigmoid, softplus
from .errors import DegenerateBatch, DomainError, InvalidConfig

MARGIN_TYPES = ("C", "A", "M")


@dataclass(frozen=True)
class MarginSoftmaxParams:
    """ψ(θ) = cos(m1·θ + m2) - m3, logits scaled by s."""

    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.0
    s: float = 32.0

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 0 or self.m3 < 0 or self.s <= 0:
            raise InvalidConfig(f"invalid margin-softmax params {self}")

    @classmethod
    def aam(cls, m=0.2, s=32.0):
        return cls(m2=m, s=s)

    @classmethod
    def am(cls, m=0.2, s=32.0):
        return cls(m3=m, s=s)

    @classmethod
    def asoftmax(cls, m=4.0, s=32.0):
        return cls(m1=m, s=s)


@dataclass(frozen=True)
class SphereFace2Params:
    lam: float = 0.7
    t: float = 3.0
    s: float = 32.0
    m: float = 0.2
    bias_init: float = 0.0
    margin_type: str = "C"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfig(f"lambda must be in [0, 1], got {self.lam}")
        if self.t < 1.0:
            raise InvalidConfig(f"t must be >= 1, got {self.t}")
        if self.s <= 0.0:
            raise InvalidConfig(f"s must be > 0, got {self.s}")
        if not 0.0 <= self.m < 1.0:
            raise InvalidConfig(f"m must be in [0, 1), got {self.m}")
        if self.margin_type not in MARGIN_TYPES:
            raise InvalidConfig(f"margin_type must be one of {MARGIN_TYPES}")


@dataclass
class LossOutput:
    value: float
    grad_cosines: np.ndarray | None = None
    grad_embeddings: np.ndarray | None = None
    grad_weights: np.ndarray | None = None
    grad_scalars: dict = field(default_factory=dict)


def with_margin(params, margin):
    """Copy of a loss parameter record with its additive/arc margin replaced.

    Raises InvalidConfig for records that carry no such margin.
    """
    if isinstance(params, SphereFace2Params):
        return replace(params, m=margin)
    if isinstance(params, MarginSoftmaxParams):
        if params.m2 > 0 and params.m3 == 0:
            return replace(params, m2=margin)
        if params.m3 > 0 and params.m2 == 0:
            return replace(params, m3=margin)
    raise InvalidConfig(f"{type(params).__name__} has no adjustable margin")


def base_margin(params):
    if isinstance(params, SphereFace2Params):
        return params.m
    if isinstance(params, MarginSoftmaxParams):
        if params.m2 > 0 and params.m3 == 0:
            return params.m2
        if params.m3 > 0 and params.m2 == 0:
            return params.m3
    raise InvalidConfig(f"{type(params).__name__} has no adjustable margin")


def _check_cosines(cos):
    cos = np.asarray(cos, dtype=float)
    check_finite(cos, "cosines")
    if np.any(np.abs(cos) > 1.0 + 1e-9):
        raise DomainError("cosines must lie in [-1, 1]")
    return np.clip(cos, -COS_CLAMP, COS_CLAMP)


def _check_labels(labels, B, K):
    labels = np.asarray(labels)
    if labels.shape != (B,) or not np.issubdtype(labels.dtype, np.integer):
        raise DomainError("labels must be one integer per row")
    if np.any(labels < 0) or np.any(labels >= K):
        raise DomainError(f"labels must lie in [0, {K})")
    return labels


def g_map(z, t):
    """Similarity adjustment g(z) = 2((z+1)/2)^t - 1 and its derivative."""
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z) > 1.0 + 1e-9):
        raise DomainError("g_map input must lie in [-1, 1]")
    if t < 1:
        raise DomainError("t must be >= 1")
    h = (np.clip(z, -1.0, 1.0) + 1.0) / 2.0
    g = 2.0 * h**t - 1.0
    dg = t * h ** (t - 1.0)
    if g.ndim == 0:
        return float(g), float(dg)
    return g, dg


def _arc(c, m):
    """cos(min(θ + m, π)) for θ = arccos(c), and its derivative w.r.t. c."""
    theta = np.arccos(c)
    phi = theta + m
    inside = phi < np.pi
    val = np.where(inside, np.cos(phi), -1.0)
    dval = np.where(inside, np.sin(np.minimum(phi, np.pi)) / np.sin(theta), 0.0)
    return val, dval


def sphereface2_batch(cos, labels, params: SphereFace2Params, bias: float):
    """Batch-mean SphereFace2 loss.

    Returns ``(value, dcos, dbias)`` with ``dcos`` shaped like ``cos``.
    """
    c = _check_cosines(cos)
    if c.ndim != 2 or c.shape[1] < 1:
        raise DomainError("cosines must be a (B, K) matrix with K >= 1")
    B, K = c.shape
    labels = _check_labels(labels, B, K)
    lam, s, m, t = params.lam, params.s, params.m, params.t
    rows = np.arange(B)
    cy = c[rows, labels]

    if params.margin_type == "C":
        pz, dpz = cy, np.ones_like(cy)
    else:
        pz, dpz = _arc(cy, m)
    gp, dgp = g_map(np.clip(pz, -1.0, 1.0), t)
    pos = gp - m if params.margin_type in ("C", "M") else gp
    dpos_dc = dgp * dpz

    gn, dgn = g_map(c, t)
    neg = gn + m

    pos_arg = -s * pos - bias
    neg_arg = s * neg + bias
    neg_mask = np.ones((B, K), dtype=bool)
    neg_mask[rows, labels] = False

    per_sample = lam * softplus(pos_arg) + (1.0 - lam) * np.sum(
        np.where(neg_mask, softplus(neg_arg), 0.0), axis=1
    )
    value = float(np.mean(per_sample))

    sig_pos = sigmoid(pos_arg)
    sig_neg = np.where(neg_mask, sigmoid(neg_arg), 0.0)
    dcos = (1.0 - lam) * s * sig_neg * dgn
    dcos[rows, labels] = -lam * s * sig_pos * dpos_dc
    dbias = float(np.sum(-lam * sig_pos + (1.0 - lam) * np.sum(sig_neg, axis=1)))
    dcos /= B
    dbias /= B
    check_finite(value, "sphereface2 loss")
    return value, dcos, dbias


def sphereface2_terms(cosines, label, params: SphereFace2Params, bias: float):
    """Per-classifier binary terms of one sample (length K), computed one by one."""
    c = _check_cosines(cosines)
    out = np.empty(c.size)
    for j in range(c.size):
        if j == label:
            if params.margin_type == "C":
                z = c[j]
            else:
                z = float(_arc(np.array([c[j]]), params.m)[0][0])
            gp = g_map(min(1.0, max(-1.0, z)), params.t)[0]
            pos = gp - params.m if params.margin_type in ("C", "M") else gp
            out[j] = params.lam * float(softplus(-params.s * pos - bias))
        else:
            gn = g_map(c[j], params.t)[0]
            out[j] = (1.0 - params.lam) * float(softplus(params.s * (gn + params.m) + bias))
    return out


def sphereface2_loss(cosines, label, params: SphereFace2Params, bias: float = 0.0) -> LossOutput:
    c = np.asarray(cosines, dtype=float)
    if c.ndim != 1 or c.size < 1:
        raise DomainError("cosines must be a non-empty vector")
    if not isinstance(label, (int, np.integer)) or not 0 <= label < c.size:
        raise DomainError(f"label {label!r} out of range for K={c.size}")
    value, dcos, dbias = sphereface2_batch(c[None, :], np.array([label]), params, bias)
    return LossOutput(value=value, grad_cosines=dcos[0], grad_scalars={"bias": dbias})


def _softmax_ce(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    B = logits.shape[0]
    rows = np.arange(B)
    lse = logsumexp(logits, axis=1)
    value = float(np.mean(lse - logits[rows, labels]))
    p = np.exp(logits - lse[:, None])
    p[rows, labels] -= 1.0
    return value, p / B


def margin_softmax_batch(cos, labels, params: MarginSoftmaxParams):
    """Batch-mean margin softmax loss; returns ``(value, dcos)``."""
    c = _check_cosines(cos)
    B, K = c.shape
    labels = _check_labels(labels, B, K)
    rows = np.arange(B)
    cy = c[rows, labels]
    theta = np.arccos(cy)
    ang = params.m1 * theta + params.m2
    psi = np.cos(ang) - params.m3
    dpsi = params.m1 * np.sin(ang) / np.sin(theta)

    logits = params.s * c
    logits[rows, labels] = params.s * psi
    value, dlogits = _softmax_ce(logits, labels)
    dcos = params.s * dlogits
    dcos[rows, labels] *= dpsi
    check_finite(value, "margin softmax loss")
    return value, dcos


def margin_softmax_loss(cosines, label, params: MarginSoftmaxParams) -> LossOutput:
    c = np.asarray(cosines, dtype=float)
    if c.ndim != 1 or not isinstance(label, (int, np.integer)) or not 0 <= label < c.size:
        raise DomainError("need a cosine vector and an in-range integer label")
    value, dcos = margin_softmax_batch(c[None, :], np.array([label]), params)
    return LossOutput(value=value, grad_cosines=dcos[0])


def plain_softmax_batch(logits, labels):
    logits = np.asarray(logits, dtype=float)
    check_finite(logits, "logits")
    B, K = logits.shape
    labels = _check_labels(labels, B, K)
    return _softmax_ce(logits, labels)


def plain_softmax_loss(logits, label) -> LossOutput:
    z = np.asarray(logits, dtype=float)
    if z.ndim != 1 or not isinstance(label, (int, np.integer)) or not 0 <= label < z.size:
        raise DomainError("need a logit vector and an in-range integer label")
    value, dz = plain_softmax_batch(z[None, :], np.array([label]))
    return LossOutput(value=value, grad_cosines=dz[0])


def _split_batch(batch):
    x = np.asarray(batch, dtype=float)
    if x.ndim != 3:
        raise DegenerateBatch("proto batch must have shape (N, M, d)")
    N, M, _ = x.shape
    if N < 2 or M < 2:
        raise DegenerateBatch(f"proto batch needs N >= 2 and M >= 2, got N={N}, M={M}")
    check_finite(x, "embeddings")
    return x, x[:, M - 1, :], x[:, : M - 1, :].mean(axis=1)


def _proto_backward(x, dq, dc):
    M = x.shape[1]
    grad = np.empty_like(x)
    grad[:, M - 1, :] = dq
    grad[:, : M - 1, :] = (dc / (M - 1))[:, None, :]
    return grad


def prototypical_loss(batch) -> LossOutput:
    """Prototypical loss with logits -||query_i - prototype_k||^2.

    Utterance ``M-1`` of each speaker is its query; the remaining ``M-1``
    utterances average into the prototype.
    """
    x, q, c = _split_batch(batch)
    N = x.shape[0]
    diff = q[:, None, :] - c[None, :, :]
    S = -np.sum(diff**2, axis=2)
    labels = np.arange(N)
    value, dS = _softmax_ce(S, labels)
    dq = np.einsum("ik,ikd->id", dS, -2.0 * diff)
    dc = np.einsum("ik,ikd->kd", dS, 2.0 * diff)
    return LossOutput(value=value, grad_embeddings=_proto_backward(x, dq, dc))


def angular_prototypical_loss(batch, w: float, b: float) -> LossOutput:
    """Angular prototypical loss with logits w·cos(query_i, prototype_k) + b."""
    if not w > 0:
        raise DomainError("w must be positive")
    x, q, c = _split_batch(batch)
    N = x.shape[0]
    nq = np.linalg.norm(q, axis=1)
    nc = np.linalg.norm(c, axis=1)
    if np.any(nq <= 1e-12) or np.any(nc <= 1e-12):
        raise DegenerateBatch("zero-norm query or prototype")
    qh = q / nq[:, None]
    ch = c / nc[:, None]
    cos = qh @ ch.T
    S = w * cos + b
    value, dS = _softmax_ce(S, np.arange(N))
    dcos = w * dS
    # d cos(u, v)/du = (v̂ - cos·û)/|u|
    dq = (dcos @ ch - np.sum(dcos * cos, axis=1)[:, None] * qh) / nq[:, None]
    dc = (dcos.T @ qh - np.sum(dcos * cos, axis=0)[:, None] * ch) / nc[:, None]
    return LossOutput(
        value=value,
        grad_embeddings=_proto_backward(x, dq, dc),
        grad_scalars={"w": float(np.sum(dS * cos)), "b": float(np.sum(dS))},
    )
