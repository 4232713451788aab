import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sf2lab.core import Rng, cosine, grad_check, is_unit, l2_normalize
from sf2lab.errors import InvalidConfig, ZeroVector, InvariantViolation, ParseError
from sf2lab.model import (
    Checkpoint,
    LossConfig,
    Model,
    SgdState,
    apply_gradients,
    checkpoint_bytes,
    checkpoint_from_bytes,
    head_cosines,
    load_checkpoint,
    loss_and_grads,
    named_loss,
    save_checkpoint,
)

ALL_LOSSES = ["softmax", "aam", "am", "asoftmax", "sphereface2", "sphereface2-a", "sphereface2-m", "proto", "angproto"]


def tiny(name, seed=0):
    return Model.init([8, 8, 4], named_loss(name), 5, Rng(seed))


def test_identity_encoder_passes_unit_input_through():
    loss = named_loss("sphereface2")
    m = Model([4, 4], loss, 3, {"enc.W0": np.eye(4), "enc.b0": np.zeros(4), "head.W": np.eye(4)[:3],
                                "head.bias": np.zeros(1)})
    x = l2_normalize(np.array([[1.0, 2.0, -0.5, 0.3]]))
    np.testing.assert_allclose(m.embed(x), x, atol=1e-15)


@given(arrays(np.float64, (5, 8), elements=st.floats(-50, 50)).filter(lambda x: np.all(np.abs(x).max(axis=1) > 1e-3)))
def test_encoder_output_rows_are_unit(x):
    emb = tiny("aam").embed(x)
    assert np.all(np.abs(np.linalg.norm(emb, axis=1) - 1) <= 1e-6)


def test_encoder_zero_input_has_no_direction():
    with pytest.raises(ZeroVector):
        tiny("aam").embed(np.zeros((1, 8)))


def test_init_heads():
    assert is_unit(tiny("sphereface2").params["head.W"])
    assert tiny("sphereface2").params["head.bias"][0] == 0.0
    assert "head.b" in tiny("softmax").params
    assert tiny("angproto").params["head.w"][0] == 10.0
    assert not any(k.startswith("head") for k in tiny("proto").params)


def test_head_cosines_examples(rng):
    W = l2_normalize(rng.normal(size=(4, 6)))
    cos = head_cosines(W[[2]], W)
    assert cos[0, 2] == pytest.approx(1.0, abs=1e-12)
    e = np.zeros((1, 3))
    e[0, 2] = 1.0
    Wo = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    np.testing.assert_array_equal(head_cosines(e, Wo), [[0.0, 0.0]])
    E = l2_normalize(rng.normal(size=(5, 6)))
    C = head_cosines(E, W)
    direct = np.array([[cosine(a, b) for b in W] for a in E])
    np.testing.assert_allclose(C, direct, atol=1e-12)


def test_head_cosines_norm_drift():
    with pytest.raises(InvariantViolation):
        head_cosines(np.array([[1.0, 0.0]]), np.array([[1.001, 0.0]]))


def _flat(model):
    names = sorted(model.params)
    return names, np.concatenate([model.params[n].ravel() for n in names])


def _unflat(model, names, vec):
    out, pos = {}, 0
    for n in names:
        size = model.params[n].size
        out[n] = vec[pos:pos + size].reshape(model.params[n].shape)
        pos += size
    return Model(model.sizes, model.loss, model.n_classes, out)


@pytest.mark.parametrize("name", ALL_LOSSES)
def test_full_pipeline_grad_check(name):
    model = tiny(name, seed=3)
    gen = np.random.default_rng(5)
    if model.loss.is_proto:
        shape = (3, 3)
        feats = gen.normal(size=(9, 8))
        labels = np.repeat(np.arange(3), 3)
    else:
        shape = None
        feats = gen.normal(size=(6, 8))
        labels = gen.integers(0, 5, size=6)
    names, x0 = _flat(model)

    def f(vec):
        m = _unflat(model, names, vec)
        value, grads = loss_and_grads(m, feats, labels, shape)
        return value, np.concatenate([grads[n].ravel() for n in names])

    assert grad_check(f, x0, eps=1e-5) <= 1e-5


def test_proto_needs_shape():
    with pytest.raises(InvalidConfig):
        loss_and_grads(tiny("proto"), np.ones((4, 8)), np.zeros(4, dtype=int))


def test_apply_gradients_fixed_point():
    m = tiny("softmax")
    zero = {k: np.zeros_like(v) for k, v in m.params.items()}
    m2, _ = apply_gradients(m, zero, SgdState(), lr=0.1, momentum=0.9, weight_decay=0.0)
    for k in m.params:
        np.testing.assert_array_equal(m2.params[k], m.params[k])


def test_apply_gradients_vanilla_step(rng):
    m = tiny("softmax")
    grads = {k: rng.normal(size=v.shape) for k, v in m.params.items()}
    m2, _ = apply_gradients(m, grads, SgdState(), lr=0.05, momentum=0.0, weight_decay=0.0)
    for k in m.params:
        np.testing.assert_array_equal(m2.params[k], m.params[k] - 0.05 * grads[k])


def test_apply_gradients_momentum_unrolled():
    m = Model([2, 2], LossConfig("softmax"), 2, {"enc.W0": np.zeros((2, 2))})
    g = {"enc.W0": np.full((2, 2), 0.5)}
    m1, s1 = apply_gradients(m, g, SgdState(), lr=0.1, momentum=0.9, weight_decay=0.0)
    m2, s2 = apply_gradients(m1, g, s1, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(m2.params["enc.W0"], -0.1 * 0.5 * (1 + 1.9), rtol=1e-15)


def test_apply_gradients_weight_decay():
    m = Model([2, 2], LossConfig("softmax"), 2, {"enc.W0": np.ones((2, 2))})
    out, _ = apply_gradients(m, {"enc.W0": np.zeros((2, 2))}, SgdState(), lr=0.5, momentum=0.9, weight_decay=0.1)
    np.testing.assert_allclose(out.params["enc.W0"], 1 - 0.5 * 0.1)


def test_apply_gradients_renormalizes_sphere_rows(rng):
    m = tiny("aam")
    grads = {k: rng.normal(size=v.shape) * 10 for k, v in m.params.items()}
    for _ in range(3):
        m, st_ = apply_gradients(m, grads, SgdState(), lr=0.3)
        assert np.all(np.abs(np.linalg.norm(m.params["head.W"], axis=1) - 1) <= 1e-6)


def test_apply_gradients_clamps_angproto_scale():
    m = tiny("angproto")
    grads = {k: np.zeros_like(v) for k, v in m.params.items()}
    grads["head.w"] = np.array([1e6])
    out, _ = apply_gradients(m, grads, SgdState(), lr=1.0)
    assert out.params["head.w"][0] == 1e-6


def test_apply_gradients_shape_mismatch():
    m = tiny("aam")
    with pytest.raises(InvalidConfig):
        apply_gradients(m, {"head.W": np.zeros(3)}, SgdState(), lr=0.1)


def _ckpt(rng):
    m = tiny("sphereface2")
    bufs = {k: rng.normal(size=v.shape) for k, v in m.params.items()}
    return Checkpoint(m, SgdState(bufs), 7, {"seed": 3, "loss": "sphereface2"}, 3, (1, 2))


def test_checkpoint_roundtrip_bit_exact(rng, tmp_path):
    ck = _ckpt(rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.epoch == 7 and back.config == ck.config and back.rng_path == (1, 2)
    assert back.model.sizes == ck.model.sizes and back.model.loss == ck.model.loss
    for k in ck.model.params:
        assert back.model.params[k].tobytes() == ck.model.params[k].tobytes()
        assert back.state.momentum_buffers[k].tobytes() == ck.state.momentum_buffers[k].tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_header_layout(rng):
    blob = checkpoint_bytes(_ckpt(rng))
    assert blob[:8] == b"SF2LCKPT"
    assert int.from_bytes(blob[8:12], "little") == 1


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3], lambda b: b + b"\0",
                                    lambda b: b[:8] + (9).to_bytes(4, "little") + b[12:]])
def test_checkpoint_corruption_detected(rng, mutate):
    with pytest.raises(ParseError):
        checkpoint_from_bytes(mutate(checkpoint_bytes(_ckpt(rng))))


@pytest.mark.parametrize("name", ALL_LOSSES)
def test_loss_label_round_trips_name(name):
    assert named_loss(name).label == name
