"""MLP encoder, classifier heads, SGD, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .core import Rng, check_finite, l2_normalize
from .errors import InvalidConfig, InvariantViolation, NonFinite, ParseError

HEAD_KINDS = {
    "softmax": "affine",
    "margin": "sphere",
    "sphereface2": "sphere",
    "proto": "none",
    "angproto": "angproto",
}
SPHERE_ROW_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    """Loss selection plus its parameter record.

    ``params`` is a MarginSoftmaxParams for ``margin``, a SphereFace2Params
    for ``sphereface2`` and None otherwise. ``w_init``/``b_init`` seed the
    learnable scalars of the angular prototypical loss.
    """

    name: str
    params: object = None
    w_init: float = 10.0
    b_init: float = -5.0

    def __post_init__(self):
        if self.name not in HEAD_KINDS:
            raise InvalidConfig(f"unknown loss {self.name!r}; choose from {sorted(HEAD_KINDS)}")
        want = {"margin": L.MarginSoftmaxParams, "sphereface2": L.SphereFace2Params}.get(self.name)
        if want is not None and not isinstance(self.params, want):
            raise InvalidConfig(f"loss {self.name!r} needs {want.__name__} params")

    @property
    def is_proto(self):
        return self.name in ("proto", "angproto")

    @property
    def label(self) -> str:
        """Short table name (``aam``, ``sphereface2-a``, ...)."""
        p = self.params
        if self.name == "margin":
            kinds = [k for k, on in (("asoftmax", p.m1 != 1), ("aam", p.m2 != 0), ("am", p.m3 != 0)) if on]
            return kinds[0] if len(kinds) == 1 else "margin"
        if self.name == "sphereface2" and p.margin_type != "C":
            return f"sphereface2-{p.margin_type.lower()}"
        return self.name

    def with_margin(self, m):
        if self.params is None:
            raise InvalidConfig(f"loss {self.name!r} has no margin parameter")
        return replace(self, params=L.with_margin(self.params, m))


def named_loss(name: str, **kw) -> LossConfig:
    """Loss configs by the short names used in experiment tables."""
    if name == "softmax":
        return LossConfig("softmax")
    if name == "aam":
        return LossConfig("margin", L.MarginSoftmaxParams.aam(kw.get("m", 0.2), kw.get("s", 32.0)))
    if name == "am":
        return LossConfig("margin", L.MarginSoftmaxParams.am(kw.get("m", 0.2), kw.get("s", 32.0)))
    if name == "asoftmax":
        return LossConfig("margin", L.MarginSoftmaxParams.asoftmax(kw.get("m", 4.0), kw.get("s", 32.0)))
    if name in ("sphereface2", "sphereface2-c", "sphereface2-a", "sphereface2-m"):
        mtype = {"sphereface2": "C"}.get(name, name[-1].upper())
        keys = {k: kw[k] for k in ("lam", "t", "s", "m", "bias_init") if k in kw}
        return LossConfig("sphereface2", L.SphereFace2Params(margin_type=mtype, **keys))
    if name in ("proto", "angproto"):
        return LossConfig(name)
    raise InvalidConfig(f"unknown loss name {name!r}")


class Model:
    """Encoder weights plus a loss-specific head, stored as a flat name -> array dict."""

    def __init__(self, sizes, loss: LossConfig, n_classes: int, params=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidConfig(f"encoder sizes must list >= 2 positive widths, got {sizes}")
        self.sizes = sizes
        self.loss = loss
        self.n_classes = int(n_classes)
        self.params = params if params is not None else {}

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def head_kind(self):
        return HEAD_KINDS[self.loss.name]

    @classmethod
    def init(cls, sizes, loss: LossConfig, n_classes: int, rng: Rng) -> "Model":
        model = cls(sizes, loss, n_classes)
        gen = rng.split("init").gen
        for i in range(model.n_layers):
            fan_in, fan_out = model.sizes[i], model.sizes[i + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            model.params[f"enc.W{i}"] = gen.uniform(-lim, lim, size=(fan_out, fan_in))
            model.params[f"enc.b{i}"] = np.zeros(fan_out)
        d = model.sizes[-1]
        kind = model.head_kind
        if kind == "sphere":
            model.params["head.W"] = l2_normalize(gen.standard_normal((n_classes, d)))
            if loss.name == "sphereface2":
                model.params["head.bias"] = np.array([loss.params.bias_init])
        elif kind == "affine":
            lim = np.sqrt(6.0 / (n_classes + d))
            model.params["head.W"] = gen.uniform(-lim, lim, size=(n_classes, d))
            model.params["head.b"] = np.zeros(n_classes)
        elif kind == "angproto":
            model.params["head.w"] = np.array([loss.w_init])
            model.params["head.b"] = np.array([loss.b_init])
        return model

    def copy(self) -> "Model":
        return Model(self.sizes, self.loss, self.n_classes, {k: v.copy() for k, v in self.params.items()})

    def encode(self, features):
        """Embeddings (unit rows) plus the activation cache for ``encode_backward``."""
        h = np.asarray(features, dtype=float)
        if h.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise InvalidConfig(f"features must be (batch, {self.sizes[0]})")
        check_finite(h, "features")
        acts = [h]
        for i in range(self.n_layers):
            a = h @ self.params[f"enc.W{i}"].T + self.params[f"enc.b{i}"]
            h = np.tanh(a) if i < self.n_layers - 1 else a
            acts.append(h)
        check_finite(h, "encoder output")
        emb = l2_normalize(h)
        return emb, acts

    def encode_backward(self, acts, emb, demb):
        """Parameter gradients of the encoder given dL/d(embeddings)."""
        v = acts[-1]
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        # normalization Jacobian (I - e eᵀ)/|v|
        dh = (demb - emb * np.sum(emb * demb, axis=1, keepdims=True)) / norms
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                dh = dh * (1.0 - acts[i + 1] ** 2)
            grads[f"enc.W{i}"] = dh.T @ acts[i]
            grads[f"enc.b{i}"] = dh.sum(axis=0)
            dh = dh @ self.params[f"enc.W{i}"]
        return grads

    def embed(self, features):
        return self.encode(features)[0]


def head_cosines(emb, W):
    """Cosine matrix between unit embeddings and unit classifier rows."""
    emb = np.asarray(emb, dtype=float)
    W = np.asarray(W, dtype=float)
    for what, arr in (("embedding", emb), ("classifier row", W)):
        norms = np.linalg.norm(arr, axis=-1)
        if np.any(np.abs(norms - 1.0) > SPHERE_ROW_TOL):
            raise InvariantViolation(f"{what} norm drifted from 1 by more than {SPHERE_ROW_TOL}")
    return np.clip(emb @ W.T, -1.0, 1.0)


def loss_and_grads(model: Model, features, labels, proto_shape=None):
    """Batch loss and gradients for every parameter in ``model.params``.

    For prototypical losses ``features`` holds N*M rows ordered speaker-major
    and ``proto_shape`` is (N, M).
    """
    emb, acts = model.encode(features)
    p = model.params
    loss = model.loss
    grads = {}
    if loss.name == "softmax":
        logits = emb @ p["head.W"].T + p["head.b"]
        value, dlog = L.plain_softmax_batch(logits, labels)
        grads["head.W"] = dlog.T @ emb
        grads["head.b"] = dlog.sum(axis=0)
        demb = dlog @ p["head.W"]
    elif loss.name in ("margin", "sphereface2"):
        cos = head_cosines(emb, p["head.W"])
        if loss.name == "margin":
            value, dcos = L.margin_softmax_batch(cos, labels, loss.params)
        else:
            value, dcos, dbias = L.sphereface2_batch(cos, labels, loss.params, float(p["head.bias"][0]))
            grads["head.bias"] = np.array([dbias])
        grads["head.W"] = dcos.T @ emb
        demb = dcos @ p["head.W"]
    else:
        if proto_shape is None:
            raise InvalidConfig("prototypical losses need proto_shape=(N, M)")
        N, M = proto_shape
        batch = emb.reshape(N, M, -1)
        if loss.name == "proto":
            out = L.prototypical_loss(batch)
        else:
            out = L.angular_prototypical_loss(batch, float(p["head.w"][0]), float(p["head.b"][0]))
            grads["head.w"] = np.array([out.grad_scalars["w"]])
            grads["head.b"] = np.array([out.grad_scalars["b"]])
        value = out.value
        demb = out.grad_embeddings.reshape(N * M, -1)
    grads.update(model.encode_backward(acts, emb, demb))
    return value, grads


@dataclass
class SgdState:
    momentum_buffers: dict = field(default_factory=dict)


def apply_gradients(model: Model, grads, state: SgdState, lr, momentum=0.9, weight_decay=1e-4):
    """One SGD step: v <- mu·v + g + wd·p; p <- p - lr·v.

    Returns a new (model, state) pair. Unit-sphere head rows are projected
    back onto the sphere and the angular-prototypical scale is kept >= 1e-6.
    """
    params = {}
    bufs = {}
    for name, value in model.params.items():
        g = grads.get(name)
        if g is None:
            params[name] = value.copy()
            continue
        if g.shape != value.shape:
            raise InvalidConfig(f"gradient shape {g.shape} != parameter shape {value.shape} for {name}")
        v = state.momentum_buffers.get(name)
        step = g + weight_decay * value
        v = step if v is None else momentum * v + step
        new = value - lr * v
        if not np.all(np.isfinite(new)):
            raise NonFinite(f"parameter {name} became non-finite")
        params[name] = new
        bufs[name] = np.array(v, dtype=float)
    # a zero step leaves rows exactly as they were (re-projection would move them by an ulp)
    if model.head_kind == "sphere" and lr != 0:
        params["head.W"] = l2_normalize(params["head.W"])
    if model.head_kind == "angproto":
        params["head.w"] = np.maximum(params["head.w"], 1e-6)
    out = Model(model.sizes, model.loss, model.n_classes, params)
    return out, SgdState(bufs)


# -- checkpoint -------------------------------------------------------------

MAGIC = b"SF2LCKPT"
FORMAT_VERSION = 1


def config_hash(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).digest()


def loss_to_dict(loss: LossConfig) -> dict:
    d = {"name": loss.name, "w_init": loss.w_init, "b_init": loss.b_init}
    if loss.params is not None:
        d["params"] = dict(vars(loss.params))
    return d


def loss_from_dict(d: dict) -> LossConfig:
    params = None
    if d["name"] == "margin":
        params = L.MarginSoftmaxParams(**d["params"])
    elif d["name"] == "sphereface2":
        params = L.SphereFace2Params(**d["params"])
    return LossConfig(d["name"], params, d.get("w_init", 10.0), d.get("b_init", -5.0))


@dataclass
class Checkpoint:
    model: Model
    state: SgdState
    epoch: int
    config: dict
    rng_seed: int = 0
    rng_path: tuple = ()

    @property
    def hash(self) -> bytes:
        return config_hash(self.config)


def _write_array(buf: list, name: str, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    buf.append(struct.pack("<I", len(nb)))
    buf.append(nb)
    buf.append(struct.pack("<Q", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.append(arr.tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "sizes": ckpt.model.sizes,
        "n_classes": ckpt.model.n_classes,
        "loss": loss_to_dict(ckpt.model.loss),
        "config": ckpt.config,
        "rng": {"seed": ckpt.rng_seed, "path": list(ckpt.rng_path)},
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = [MAGIC, struct.pack("<I", FORMAT_VERSION), ckpt.hash, struct.pack("<Q", ckpt.epoch)]
    buf.append(struct.pack("<Q", len(meta_b)))
    buf.append(meta_b)
    arrays = [(f"param/{k}", v) for k, v in ckpt.model.params.items()]
    arrays += [(f"momentum/{k}", v) for k, v in ckpt.state.momentum_buffers.items()]
    buf.append(struct.pack("<Q", len(arrays)))
    for name, arr in arrays:
        _write_array(buf, name, arr)
    return b"".join(buf)


def checkpoint_from_bytes(data: bytes, path=None) -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("truncated checkpoint", path=path, offset=pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", path=path, offset=0)
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=path, offset=8)
    stored_hash = take(32)
    (epoch,) = struct.unpack("<Q", take(8))
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (n_arrays,) = struct.unpack("<Q", take(8))
    params, bufs = {}, {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(float)
        kind, _, key = name.partition("/")
        (params if kind == "param" else bufs)[key] = arr
    if pos != len(data):
        raise ParseError("trailing bytes after checkpoint payload", path=path, offset=pos)
    model = Model(meta["sizes"], loss_from_dict(meta["loss"]), meta["n_classes"], params)
    ckpt = Checkpoint(model, SgdState(bufs), epoch, meta["config"], meta["rng"]["seed"], tuple(meta["rng"]["path"]))
    if ckpt.hash != stored_hash:
        raise ParseError("config hash mismatch", path=path, offset=12)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), path=path)
