import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sf2lab.core import Rng, cosine, grad_check, is_unit, l2_normalize, logsumexp, softplus
from sf2lab.errors import NonFinite, ZeroVector

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(2, 8), elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_l2_normalize_examples():
    np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0])


def test_l2_normalize_rows():
    m = l2_normalize(np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(m, [[0.6, 0.8], [0.0, 1.0]])
    assert is_unit(m)


def test_l2_normalize_rejects_nan():
    with pytest.raises(NonFinite):
        l2_normalize([np.nan, 1.0])


@given(vectors)
def test_l2_normalize_idempotent(v):
    once = l2_normalize(v)
    np.testing.assert_allclose(l2_normalize(once), once, rtol=0, atol=1e-12)
    assert abs(np.linalg.norm(once) - 1) <= 1e-6


def test_cosine_examples():
    assert cosine([2.0, 1.0], [2.0, 1.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine([1.0, 0.0], [0.0, 5.0]) == 0.0
    assert cosine([1.0, 0.0], [1.0, 1.0]) == pytest.approx(np.sqrt(0.5), abs=1e-15)
    with pytest.raises(ZeroVector):
        cosine([0.0, 0.0], [1.0, 0.0])


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))),
    st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(uv, a, b):
    u, v = uv
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    c = cosine(u, v)
    assert -1.0 <= c <= 1.0
    assert cosine(v, u) == pytest.approx(c, abs=1e-12)
    assert cosine(a * u, b * v) == pytest.approx(c, abs=1e-12)


def test_grad_check_exact_quadratic(rng):
    x = rng.normal(size=7)
    assert grad_check(lambda z: (float(z @ z), 2 * z), x) <= 1e-9


def test_grad_check_detects_wrong_gradient(rng):
    x = rng.normal(size=5)
    err = grad_check(lambda z: (float(z.sum()), np.zeros_like(z)), x)
    assert err == pytest.approx(1.0, abs=1e-6)


def test_grad_check_nonfinite():
    with pytest.raises(NonFinite):
        grad_check(lambda z: (float(z[0]) if z[0] > 0 else float("inf"), np.ones(1)), np.array([1e-6]), eps=1e-5)


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        grad_check(lambda z: (0.0, z), np.zeros(2), eps=1e-2)


def test_stable_helpers():
    assert softplus(1000.0) == 1000.0
    assert softplus(-1000.0) == 0.0
    assert float(softplus(0.0)) == pytest.approx(np.log(2))
    assert float(logsumexp(np.array([1000.0, 1000.0]))) == pytest.approx(1000 + np.log(2))


def test_rng_determinism_and_split():
    a = Rng(7).split("data", 3).gen.standard_normal(5)
    b = Rng(7).split("data", 3).gen.standard_normal(5)
    assert a.tobytes() == b.tobytes()
    c = Rng(7).split("data", 4).gen.standard_normal(5)
    d = Rng(8).split("data", 3).gen.standard_normal(5)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_rng_split_ignores_parent_consumption():
    r = Rng(11)
    before = r.split("x").gen.random(3)
    r.gen.random(1000)
    assert np.array_equal(before, r.split("x").gen.random(3))
