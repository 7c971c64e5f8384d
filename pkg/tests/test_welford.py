import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiva.welford import (
    FIVA_G,
    FIVA_P,
    SIGMA2_MAX,
    SIGMA2_MIN,
    VarianceTracker,
    WelfordAccumulator,
    finalize_fiva_g,
    finalize_fiva_p,
    finalize_variance,
    welford_update,
)


def feed(values, size=1):
    acc = WelfordAccumulator(size)
    for v in values:
        welford_update(acc, np.atleast_1d(np.asarray(v, dtype=float)))
    return acc


def two_pass(stream):
    s = np.asarray(stream, dtype=float)
    mean = s.sum(axis=0) / len(s)
    return mean, ((s - mean) ** 2).sum(axis=0) / len(s)


def test_constant_stream():
    acc = feed([5, 5, 5])
    assert acc.mean[0] == 5.0 and acc.m2[0] == 0.0


def test_small_stream_against_two_pass():
    acc = feed([1, 2, 3])
    assert acc.mean[0] == pytest.approx(2.0, abs=1e-15)
    assert acc.m2[0] == pytest.approx(2.0, abs=1e-15)
    assert finalize_variance(acc)[0] == pytest.approx(2 / 3, abs=1e-15)
    assert two_pass([1, 2, 3])[1] == pytest.approx(2 / 3)


def test_single_element():
    acc = feed([4.2])
    assert acc.mean[0] == 4.2 and acc.m2[0] == 0.0
    assert finalize_variance(acc)[0] == 0.0


def test_empty_and_bad_input():
    acc = WelfordAccumulator(2)
    assert np.all(acc.mean == 0) and np.all(acc.m2 == 0)
    with pytest.raises(ValueError):
        finalize_variance(acc)
    with pytest.raises(ValueError):
        acc.update(np.ones(3))
    with pytest.raises(ValueError):
        acc.update(np.array([1.0, np.nan]))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=200), st.randoms())
def test_oracle_equivalence_and_permutation(stream, rnd):
    acc = feed(stream)
    mean, var = two_pass(stream)
    assert acc.m2[0] >= 0
    np.testing.assert_allclose(acc.mean, mean, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(finalize_variance(acc), var, rtol=1e-10, atol=1e-12)
    shuffled = list(stream)
    rnd.shuffle(shuffled)
    acc2 = feed(shuffled)
    np.testing.assert_allclose(acc2.mean, acc.mean, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(finalize_variance(acc2), finalize_variance(acc), rtol=1e-10, atol=1e-12)


def test_state_size_independent_of_stream_length():
    acc = WelfordAccumulator(50)
    before = sum(a.nbytes for a in acc.state_arrays())
    for _ in range(1000):
        acc.update(np.random.default_rng(0).random(50))
    assert sum(a.nbytes for a in acc.state_arrays()) == before == 2 * 50 * 8


def test_fiva_g_values():
    out = finalize_fiva_g(np.array([0.0]), np.array([0.25]), T=4, eta=0.1, lo=0.0)
    assert out.sigma2[0] == pytest.approx(4 * 0.01 * 0.25, abs=1e-15)
    assert out.mode == FIVA_G
    prev = np.array([0.3, 1e-12, 500.0])
    np.testing.assert_array_equal(finalize_fiva_g(prev, np.zeros(3), 5, 0.1).sigma2, [0.3, SIGMA2_MIN, SIGMA2_MAX])
    assert finalize_fiva_g(np.array([99.0]), np.array([1e4]), 10, 0.1).sigma2[0] == SIGMA2_MAX
    with pytest.raises(ValueError):
        finalize_fiva_g(np.array([-1.0]), np.array([0.0]), 1, 0.1)


def test_fiva_p_values():
    acc = feed([0.0, 0.2, 0.4])
    out = finalize_fiva_p(acc)
    # mean 0.2, squared deviations 0.04 + 0 + 0.04 over 3
    assert out.sigma2[0] == pytest.approx(0.08 / 3, abs=1e-12)
    assert out.mode == FIVA_P
    assert finalize_fiva_p(feed([1.5, 1.5, 1.5])).sigma2[0] == SIGMA2_MIN
    c = 7.0
    scaled = finalize_fiva_p(feed([0.0, 0.2 * c, 0.4 * c])).sigma2[0]
    assert scaled == pytest.approx(c * c * out.sigma2[0], rel=1e-12)
    with pytest.raises(ValueError):
        finalize_fiva_p(feed([1.0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_clamp_containment(stream):
    v = finalize_fiva_p(feed(stream)).sigma2
    assert SIGMA2_MIN <= v[0] <= SIGMA2_MAX


def test_tracker_holds_three_parameter_sized_arrays():
    for mode in (FIVA_G, FIVA_P):
        tr = VarianceTracker(123, mode)
        arrays = tr.state_arrays()
        assert len(arrays) == 3 and all(a.shape == (123,) for a in arrays)


def test_tracker_modes_track_the_right_stream():
    g = VarianceTracker(1, FIVA_G)
    p = VarianceTracker(1, FIVA_P)
    thetas, grads = [1.0, 0.9, 0.85], [1.0, 0.5, 0.0]
    for th, gr in zip(thetas, grads):
        g.observe(np.array([th]), np.array([gr]))
        p.observe(np.array([th]), np.array([gr]))
    assert g.acc.mean[0] == pytest.approx(0.5)
    assert p.acc.mean[0] == pytest.approx(0.9166666666666666)
