"""Randomized gradient checks for every loss, as used by ``sf2lab grad-check``."""

from __future__ import annotations

import numpy as np

from . import losses as L
from .core import Rng, grad_check
from .errors import InvalidConfig

GRAD_CHECK_LOSSES = (
    "softmax",
    "asoftmax",
    "am",
    "aam",
    "proto",
    "angproto",
    "sphereface2",
    "sphereface2-a",
    "sphereface2-m",
)
K = 10


def _margin_params(name):
    # standard comparison settings: margin 0.2 and scale 32 for AM/AAM, margin 4 for A-softmax
    return {
        "asoftmax": L.MarginSoftmaxParams.asoftmax(4.0, 32.0),
        "am": L.MarginSoftmaxParams.am(0.2, 32.0),
        "aam": L.MarginSoftmaxParams.aam(0.2, 32.0),
    }[name]


def _one(name, gen, eps):
    if name == "softmax":
        z = gen.normal(0.0, 3.0, K)
        y = int(gen.integers(K))

        def f(v):
            out = L.plain_softmax_loss(v, y)
            return out.value, out.grad_cosines

        return grad_check(f, z, eps)

    if name in ("asoftmax", "am", "aam"):
        p = _margin_params(name)
        c = gen.uniform(-0.95, 0.95, K)
        y = int(gen.integers(K))

        def f(v):
            out = L.margin_softmax_loss(v, y, p)
            return out.value, out.grad_cosines

        return grad_check(f, c, eps)

    if name.startswith("sphereface2"):
        mtype = {"sphereface2": "C"}.get(name, name[-1].upper())
        p = L.SphereFace2Params(
            lam=float(gen.uniform(0, 1)),
            t=float(gen.uniform(1, 4)),
            s=32.0,
            m=float(gen.uniform(0, 0.4)),
            margin_type=mtype,
        )
        c = gen.uniform(-0.95, 0.95, K)
        y = int(gen.integers(K))
        b = float(gen.normal(0, 3))

        def f(v):
            out = L.sphereface2_loss(v, y, p, b)
            return out.value, out.grad_cosines

        def fb(v):
            out = L.sphereface2_loss(c, y, p, float(v[0]))
            return out.value, [out.grad_scalars["bias"]]

        return max(grad_check(f, c, eps), grad_check(fb, np.array([b]), eps))

    x = gen.normal(size=(4, 3, 8))
    if name == "proto":

        def f(v):
            out = L.prototypical_loss(v)
            return out.value, out.grad_embeddings

        return grad_check(f, x, eps)

    if name == "angproto":
        w, b = float(gen.uniform(1, 10)), float(gen.normal())

        def fx(v):
            out = L.angular_prototypical_loss(v, w, b)
            return out.value, out.grad_embeddings

        def fwb(v):
            out = L.angular_prototypical_loss(x, float(v[0]), float(v[1]))
            return out.value, [out.grad_scalars["w"], out.grad_scalars["b"]]

        return max(grad_check(fx, x, eps), grad_check(fwb, np.array([w, b]), eps))

    raise InvalidConfig(f"unknown loss {name!r}; choose from {', '.join(GRAD_CHECK_LOSSES)}")


def random_grad_checks(name: str, trials: int, seed: int, eps: float = 1e-5) -> float:
    """Max relative gradient error over ``trials`` random configurations of one loss."""
    if name not in GRAD_CHECK_LOSSES:
        raise InvalidConfig(f"unknown loss {name!r}; choose from {', '.join(GRAD_CHECK_LOSSES)}")
    gen = Rng(seed).split("grad-check", name).gen
    return max(_one(name, gen, eps) for _ in range(trials))
