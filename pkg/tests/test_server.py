import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiva.server import (
    FEDAVG,
    FIVA,
    AggregationConfig,
    ClientUpdate,
    GlobalState,
    aggregate,
    aggregate_mean,
    aggregate_variance,
    broadcast,
    client_weight,
    relative_sizes,
)
from fiva.welford import SIGMA2_MAX

FIVA_CFG = AggregationConfig(FIVA)
AVG_CFG = AggregationConfig(FEDAVG)


def upd(theta, sigma2, n=1, mask=None):
    return ClientUpdate(np.atleast_1d(np.asarray(theta, float)), np.atleast_1d(np.asarray(sigma2, float)), n, mask)


def test_client_weight():
    assert client_weight(0.5, np.array([1.0]))[0] == 0.5
    assert client_weight(0.5, np.array([3.0]))[0] == pytest.approx(1 / 6, abs=1e-15)
    assert 0 < client_weight(0.5, np.array([SIGMA2_MAX]))[0] < 0.5
    with pytest.raises(ValueError):
        client_weight(0.5, np.array([0.0]))


def test_two_client_fixtures():
    assert aggregate_mean([upd(0, 1), upd(2, 1)], FIVA_CFG)[0] == pytest.approx(1.0, abs=1e-12)
    # weights 0.5/1 and 0.5/3: (0*0.5 + 2/6) / (0.5 + 1/6) = 0.5
    assert aggregate_mean([upd(0, 1), upd(2, 3)], FIVA_CFG)[0] == pytest.approx(0.5, abs=1e-12)
    assert aggregate_mean([upd(3.25, 7)], FIVA_CFG)[0] == 3.25


def test_variance_fixtures():
    v = aggregate_variance([upd(0, 1), upd(0, 1)], np.array([1.0]), FIVA_CFG)
    assert v[0] == pytest.approx(1 / 1.95, abs=1e-12)
    cfg0 = AggregationConfig(FIVA, lam=0.0)
    assert aggregate_variance([upd(0, 0.37)], np.array([1.0]), cfg0)[0] == pytest.approx(0.37, abs=1e-15)
    cfg1 = AggregationConfig(FIVA, lam=1.0)
    assert aggregate_variance([], np.array([0.42]), cfg1)[0] == pytest.approx(0.42, abs=1e-15)


def test_fedavg_ignores_variance():
    a = aggregate_mean([upd(0, 1, 3), upd(4, 100, 1)], AVG_CFG)
    assert a[0] == pytest.approx(1.0)
    assert aggregate_variance([upd(0, 5)], np.array([1.0]), AVG_CFG)[0] == 1.0


def test_errors():
    with pytest.raises(ValueError):
        aggregate_mean([], FIVA_CFG)
    with pytest.raises(ValueError):
        aggregate_mean([upd([0, 1], [1, 1]), upd([0], [1])], FIVA_CFG)
    with pytest.raises(ValueError):
        AggregationConfig(FIVA, lam=1.5)


def random_updates(rng, n_clients, m, equal_var=False):
    common = rng.uniform(0.01, 2, m)
    return [
        ClientUpdate(rng.normal(0, 1, m), common.copy() if equal_var else rng.uniform(0.01, 2, m),
                     int(rng.integers(1, 100)))
        for _ in range(n_clients)
    ]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_aggregation_properties(n_clients, m, seed):
    rng = np.random.default_rng(seed)
    ups = random_updates(rng, n_clients, m)
    thetas = np.stack([u.theta for u in ups])
    for cfg in (FIVA_CFG, AVG_CFG):
        g = aggregate_mean(ups, cfg)
        assert np.all(g >= thetas.min(0) - 1e-12) and np.all(g <= thetas.max(0) + 1e-12)
        perm = rng.permutation(n_clients)
        np.testing.assert_allclose(aggregate_mean([ups[i] for i in perm], cfg), g, rtol=1e-12, atol=1e-12)
    # uniform variance rescaling leaves the FIVA mean unchanged
    c = rng.uniform(0.1, 10)
    scaled = [ClientUpdate(u.theta, u.sigma2 * c, u.n) for u in ups]
    np.testing.assert_allclose(aggregate_mean(scaled, FIVA_CFG), aggregate_mean(ups, FIVA_CFG), rtol=1e-12, atol=1e-12)
    # adding the prior precision can only shrink the variance
    prev = rng.uniform(0.01, 5, m)
    v = aggregate_variance(ups, prev, AggregationConfig(FIVA, sigma2_min=0.0))
    n_hat = relative_sizes(ups)
    bound = 1.0 / (n_hat / np.stack([u.sigma2 for u in ups])).sum(0)
    assert np.all(v <= bound * (1 + 1e-12))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_equal_variance_reduces_to_fedavg(n_clients, m, seed):
    ups = random_updates(np.random.default_rng(seed), n_clients, m, equal_var=True)
    np.testing.assert_allclose(aggregate_mean(ups, FIVA_CFG), aggregate_mean(ups, AVG_CFG), rtol=1e-12, atol=1e-15)


def test_masked_aggregation_uses_only_owners():
    own_all = np.array([True, True])
    only_first = np.array([True, False])
    ups = [upd([1.0, 5.0], [1.0, 1.0], 1, own_all), upd([3.0, -9.0], [1e-8, 1e-8], 3, only_first)]
    g = aggregate_mean(ups, FIVA_CFG, prev_theta=np.zeros(2))
    assert g[1] == 5.0
    n_hat = relative_sizes(ups)
    np.testing.assert_allclose(n_hat[:, 1], [1.0, 0.0])
    v = aggregate_variance(ups, np.ones(2), FIVA_CFG)
    assert v[1] == pytest.approx(1 / (0.95 + 1.0))


def test_broadcast_and_round_counter():
    state = GlobalState.initial(np.array([0.5, -1.0]))
    assert np.all(state.sigma2 == 1.0) and state.round == 0
    nxt = aggregate([upd([1.0, 2.0], [1.0, 1.0])], state, FIVA_CFG)
    assert nxt.round == state.round + 1
    copies = broadcast(nxt, 4)
    assert len(copies) == 4
    for c in copies:
        assert c.theta.tobytes() == nxt.theta.tobytes()
        assert c.sigma2.tobytes() == nxt.sigma2.tobytes()
        assert c.theta is not nxt.theta
