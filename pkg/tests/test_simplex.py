import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from warpfit.exceptions import NonMonotone, ZeroIncrement
from warpfit.simplex import (
    CLRTransformer,
    WarpingFunction,
    clr_forward,
    clr_inverse,
    clr_matrix,
    log_derivative_curve,
)

LN2 = np.log(2.0)

finite = st.floats(-30, 30, allow_nan=False)
vectors = st.integers(1, 30).flatmap(lambda m: arrays(float, m, elements=finite))
increments = st.integers(1, 30).flatmap(
    lambda m: arrays(float, m, elements=st.floats(1e-3, 1e3)))


def warp_from_increments(dh):
    dh = np.asarray(dh, dtype=float)
    values = np.concatenate(([0.0], np.cumsum(dh / dh.sum())))
    values[-1] = 1.0
    return WarpingFunction(np.linspace(0, 1, values.size), values)


def test_identity_maps_to_zero():
    np.testing.assert_allclose(clr_forward(WarpingFunction.identity(np.linspace(0, 1, 5))),
                               np.zeros(4), atol=1e-15)


def test_analytic_example():
    s = clr_forward(np.array([0.0, 0.5, 0.75, 1.0]))
    np.testing.assert_allclose(s, [2 / 3 * LN2, -LN2 / 3, -LN2 / 3], rtol=1e-14)
    np.testing.assert_allclose(s, [0.46210, -0.23105, -0.23105], atol=1e-5)


def test_inverse_of_analytic_example():
    h = clr_inverse(np.array([2 / 3 * LN2, -LN2 / 3, -LN2 / 3]))
    np.testing.assert_allclose(h.values, [0.0, 0.5, 0.75, 1.0], atol=1e-15)


def test_zero_vector_gives_identity():
    h = clr_inverse(np.zeros(15))
    np.testing.assert_allclose(h.values, np.linspace(0, 1, 16), atol=1e-15)


def test_zero_increment_rejected_unless_floored():
    with pytest.raises(ZeroIncrement):
        clr_forward(np.array([0.0, 0.5, 0.5, 1.0]))
    s = clr_forward(np.array([0.0, 0.5, 0.5, 1.0]), floor=True)
    assert np.all(np.isfinite(s)) and abs(s.sum()) < 1e-9


def test_warping_function_rejects_non_monotone():
    with pytest.raises(NonMonotone):
        WarpingFunction(np.linspace(0, 1, 3), [0.0, 0.7, 0.6])
    with pytest.raises(NonMonotone):
        WarpingFunction(np.linspace(0, 1, 3), [0.1, 0.5, 1.0])


def test_geometric_increments_give_linear_log_derivative():
    r = 1.3
    dh = r ** np.arange(10)
    s = log_derivative_curve(clr_forward(warp_from_increments(dh)))
    np.testing.assert_allclose(np.diff(s), np.full(9, np.log(r)), rtol=1e-12)


def test_transformer_round_trip(rng):
    H = np.vstack([warp_from_increments(rng.uniform(0.1, 1, 8)).values for _ in range(5)])
    t = CLRTransformer().fit(H)
    S = t.transform(H)
    np.testing.assert_allclose(S, clr_matrix(H))
    np.testing.assert_allclose(t.inverse_transform(S), H, atol=1e-14)


@given(increments)
def test_forward_then_inverse_is_identity(dh):
    h = warp_from_increments(dh)
    back = clr_inverse(clr_forward(h))
    assert np.max(np.abs(back.values - h.values)) < 1e-10


@given(vectors)
def test_inverse_then_forward_is_identity(s):
    s = s - s.mean()
    h = clr_inverse(s)
    # increments are differences of stored values near 1, so their log carries
    # an error of order eps / min increment; check where that is below 1e-10
    if np.min(h.increments) > 1e-5:
        assert np.max(np.abs(clr_forward(h) - s)) < 1e-10


@given(vectors)
def test_inverse_always_valid(s):
    h = clr_inverse(s)
    assert h.values[0] == 0.0 and h.values[-1] == 1.0
    assert np.all(np.diff(h.values) > 0)


@given(vectors, st.floats(-1e3, 1e3))
def test_constant_shift_invariance(s, c):
    np.testing.assert_allclose(clr_inverse(s + c).values, clr_inverse(s).values, atol=1e-12)


@given(increments)
def test_forward_is_zero_sum(dh):
    assert abs(clr_forward(warp_from_increments(dh)).sum()) < 1e-12 * dh.size * 30


@given(increments, st.floats(1e-3, 1e3))
def test_forward_is_scale_free(dh, c):
    np.testing.assert_allclose(clr_forward(warp_from_increments(dh * c)),
                               clr_forward(warp_from_increments(dh)), atol=1e-10)


@given(increments)
def test_exp_of_log_derivative_reproduces_increments(dh):
    h = warp_from_increments(dh)
    e = np.exp(log_derivative_curve(clr_forward(h)))
    np.testing.assert_allclose(e / e.sum(), h.increments, rtol=1e-9)
