import numpy as np
import pytest

from fiva import nn
from fiva.client import ClientConfig, batch_sampler, local_round, poly_lr, sgd_step
from fiva.nn import LossValue
from fiva.server import GlobalState
from fiva.synthdata import train_val_split
from fiva.welford import FIVA_G, FIVA_P, SIGMA2_MIN


def test_sgd_step_plain():
    th = np.array([1.0])
    assert np.array_equal(sgd_step(th, np.zeros(1), 0.1), th)
    assert sgd_step(th, np.array([0.5]), 0.1)[0] == pytest.approx(0.95, abs=1e-15)
    two = sgd_step(sgd_step(th, np.array([0.5]), 0.1), np.array([0.5]), 0.1)
    assert two[0] == pytest.approx(1.0 - 2 * 0.1 * 0.5, abs=1e-15)
    with pytest.raises(FloatingPointError):
        sgd_step(th, np.array([np.inf]), 0.1)


def test_sgd_step_nesterov():
    v = np.zeros(1)
    th = sgd_step(np.array([0.0]), np.array([1.0]), 0.1, v, momentum=0.9)
    # v = 1, step = 1 + 0.9 * 1
    assert v[0] == 1.0 and th[0] == pytest.approx(-0.19)
    th = sgd_step(th, np.array([1.0]), 0.1, v, momentum=0.9)
    # v = 1.9, step = 1 + 1.71
    assert th[0] == pytest.approx(-0.19 - 0.271)


def test_poly_lr():
    lrs = [poly_lr(s, 0.01, 100) for s in range(101)]
    assert lrs[0] == 0.01 and lrs[-1] == 0.0
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert poly_lr(50, 0.01, 100) == pytest.approx(0.01 * 0.5**0.9)


def test_split_disjoint():
    tr, va = train_val_split(100, seed=3)
    assert len(tr) == 80 and len(va) == 20
    assert not set(tr) & set(va) and set(tr) | set(va) == set(range(100))


def test_batch_sampler(small_data):
    ds = small_data[0]
    n = len(ds.train_idx)
    full = batch_sampler(ds, n, seed=0, step=5)
    assert sorted(full.indices) == sorted(ds.train_idx)
    a, b = batch_sampler(ds, 4, 1, 17), batch_sampler(ds, 4, 1, 17)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.indices, b.indices)
    per_epoch = n // 4
    seen = np.concatenate([batch_sampler(ds, 4, 1, s).indices for s in range(per_epoch)])
    assert len(set(seen)) == len(seen)
    with pytest.raises(ValueError):
        batch_sampler(ds, n + 1, 0, 0)


def _config(ds, **kw):
    base = dict(client_id=ds.name, n_samples=len(ds.train_idx), local_steps=4, batch_size=4, lr=0.05,
                total_steps=40, momentum=0.0, variance_mode=FIVA_P, seed=3)
    base.update(kw)
    return ClientConfig(**base)


def test_zero_lr_keeps_theta(small_data, small_model):
    ds = small_data[0]
    start = GlobalState.initial(nn.init_model(small_model, 0))
    out = local_round(start, _config(ds, lr=0.0), ds, small_model)
    assert np.array_equal(out.theta, start.theta)
    assert np.all(out.sigma2 == SIGMA2_MIN)


def test_fedavg_mode_sentinel(small_data, small_model):
    ds = small_data[1]
    start = GlobalState.initial(nn.init_model(small_model, 0))
    out = local_round(start, _config(ds, variance_mode="none"), ds, small_model)
    assert np.all(out.sigma2 == 1.0)
    assert out.n == len(ds.train_idx)
    assert out.mask.sum() < out.theta.size


def test_tracking_never_perturbs_trajectory(small_data, small_model):
    ds = small_data[0]
    start = GlobalState.initial(nn.init_model(small_model, 0))
    runs = [local_round(start, _config(ds, variance_mode=m), ds, small_model) for m in ("none", FIVA_P, FIVA_G)]
    assert runs[0].theta.tobytes() == runs[1].theta.tobytes() == runs[2].theta.tobytes()


def test_theta_independent_of_received_variance(small_data, small_model):
    ds = small_data[2]
    th = nn.init_model(small_model, 1)
    a = local_round(GlobalState(th, np.ones_like(th), 2), _config(ds, variance_mode=FIVA_G), ds, small_model)
    b = local_round(GlobalState(th, np.full_like(th, 0.3), 2), _config(ds, variance_mode=FIVA_G), ds, small_model)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert not np.array_equal(a.sigma2, b.sigma2)


def test_refuses_holdout(small_world, small_model):
    from fiva.synthdata import generate_client_dataset

    hold = generate_client_dataset(small_world, "holdout")
    start = GlobalState.initial(nn.init_model(small_model, 0))
    with pytest.raises(ValueError):
        local_round(start, _config(hold), hold, small_model, head="a")


def _scripted(grads):
    def grad_fn(theta, batch, step):
        return LossValue(0.0, 0.0, 0.0), np.array([grads[step]])
    return grad_fn


@pytest.mark.parametrize("mode", [FIVA_G, FIVA_P])
def test_three_step_desk_simulation(small_data, mode):
    ds = small_data[0]
    grads = [0.4, -0.2, 1.0]
    eta = 0.1
    prev_var = 0.5
    # hand-run of theta_t = theta_{t-1} - eta*g_t from theta_0 = 2
    thetas = [2.0 - 0.04, 2.0 - 0.04 + 0.02, 2.0 - 0.04 + 0.02 - 0.1]  # 1.96, 1.98, 1.88
    if mode == FIVA_G:
        g_mean = (0.4 - 0.2 + 1.0) / 3
        g_var = sum((g - g_mean) ** 2 for g in grads) / 3
        expected_var = prev_var + 3 * eta**2 * g_var
    else:
        t_mean = sum(thetas) / 3
        expected_var = sum((t - t_mean) ** 2 for t in thetas) / 3
    cfg = ClientConfig("a", 10, local_steps=3, batch_size=2, lr=eta, total_steps=0, momentum=0.0,
                       variance_mode=mode, seed=0)
    out = local_round(GlobalState(np.array([2.0]), np.array([prev_var]), 0), cfg, ds, None, grad_fn=_scripted(grads))
    assert out.theta[0] == pytest.approx(thetas[-1], abs=1e-14)
    assert out.sigma2[0] == pytest.approx(expected_var, rel=1e-12)
