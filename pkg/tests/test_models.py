import numpy as np
import pytest

from hrpinn import autodiff as ad
from hrpinn import nn
from hrpinn.errors import ConfigError, DivergenceError, StructuralError
from hrpinn.integrate import generate_reference
from hrpinn.models import (Model, ModelConfig, load_model, member_params, pinn_loss,
                           pinn_trajectory, save_model, soft_constraint_penalty)
from hrpinn.systems import Trajectory, make_system

from conftest import rel_err


def zero_net(sizes):
    p = nn.mlp_init(sizes, 0)
    return nn.MlpParams(sizes, [w * 0 for w in p.weights], [b * 0 for b in p.biases])


def test_node_zero_net_is_constant():
    m = Model(ModelConfig(kind="NODE", K=50, hidden=(8,)))
    res = m.rollout({"f": zero_net(m.net_sizes)})
    assert np.all(res.trajectory.states == m.system.x0)
    assert res.per_step_violation.shape == (51,)
    assert np.all(res.per_step_violation >= 0)


def test_phrpinn_zero_net_robot_arm_matches_reference():
    m = Model(ModelConfig(kind="PHRPINN", system="robot_arm", projection_mode="robust", K=200,
                          hidden=(8,)))
    res = m.rollout({"f": zero_net(m.net_sizes)})
    ref = generate_reference(m.system, K=200)
    assert np.abs(res.trajectory.states - ref.states).max() < 1e-8


def test_soft_penalty_examples():
    g = np.array([[0.1], [0.3]])
    assert float(soft_constraint_penalty(g, 1.0)) == pytest.approx(0.05, abs=1e-15)
    assert soft_constraint_penalty(g, 0.0) == 0.0
    assert float(soft_constraint_penalty(np.zeros((5, 2)), 3.0)) == 0.0
    with pytest.raises(ConfigError):
        soft_constraint_penalty(g, -1.0)


def test_soft_constraint_adds_penalty():
    s = make_system("mass_spring")
    data = generate_reference(s, K=20)
    base = ModelConfig(kind="HRPINN", K=20, hidden=(6,))
    soft = ModelConfig(kind="HRPINN", K=20, hidden=(6,), soft_constraint=True,
                       soft_constraint_weight=2.0)
    p = Model(base).init_params(3)
    l0 = float(Model(base).loss(p, data))
    l1 = float(Model(soft).loss(p, data))
    pred = Model(base).rollout(p, K=20).trajectory.states
    g = np.asarray(s.g_raw(pred, data.times)) - s.offset
    assert l1 - l0 == pytest.approx(2.0 * np.mean(np.sum(g ** 2, axis=-1)), rel=1e-12)
    assert soft.label == "HRPINN-soft"


def _toy_series():
    return Trajectory([0.0, 0.5, 1.0], [[1.0, 0.0], [0.5, -0.5], [0.0, -1.0]])


def test_pinn_degenerate_weights_is_data_mse():
    m = Model(ModelConfig(kind="PINN", K=2, dt=0.5, hidden=(4,), pinn_hidden=(4,)))
    p = m.init_params(0)
    data = _toy_series()
    xh = np.asarray(pinn_trajectory(p["x"], data.times, (0.0, 1.0)))
    L = float(pinn_loss(m, p, data, 0.0, 0.0))
    assert L == pytest.approx(np.mean((xh - data.states) ** 2), rel=1e-14)


def test_pinn_constant_output_hand_value():
    m = Model(ModelConfig(kind="PINN", K=2, dt=0.5, hidden=(4,), pinn_hidden=(3,)))
    x = zero_net(m.pinn_sizes)
    x.biases[-1][:] = [0.5, -0.5]
    p = {"x": x, "f": m.init_params(0)["f"]}
    # squared offsets: (0.25, 0.25), (0, 0), (0.25, 0.25) -> mean 1/6
    assert float(pinn_loss(m, p, _toy_series(), 0.0, 0.0)) == pytest.approx(1 / 6, rel=1e-15)


def test_pinn_time_derivative_matches_fd():
    p = nn.mlp_init((1, 6, 6, 2), 5)
    p.biases[0][:] = np.linspace(-0.5, 0.5, 6)
    t = np.linspace(0.1, 1.9, 7)
    x, dx = pinn_trajectory(p, t, (0.0, 2.0), with_derivative=True)
    h = 1e-6
    fd = (np.asarray(pinn_trajectory(p, t + h, (0.0, 2.0)))
          - np.asarray(pinn_trajectory(p, t - h, (0.0, 2.0)))) / (2 * h)
    assert rel_err(dx, fd) < 1e-8


def test_pinn_residual_terms_by_hand():
    s = make_system("mass_spring")
    m = Model(ModelConfig(kind="PINN", K=10, hidden=(4,), pinn_hidden=(5,)), s)
    p = m.init_params(2)
    data = generate_reference(s, K=10)
    tr = (0.0, 0.1)
    x, dx = (np.asarray(a) for a in pinn_trajectory(p["x"], data.times, tr, True))
    rhs = np.asarray(s.prior(x, 0.0, None)) + np.asarray(nn.mlp_forward(p["f"], x))
    g = np.asarray(s.g_raw(x, data.times)) - s.offset
    expected = (np.mean((x - data.states) ** 2) + 0.7 * np.mean(np.sum((dx - rhs) ** 2, -1))
                + 0.2 * np.mean(np.sum(g ** 2, -1)))
    assert float(pinn_loss(m, p, data, 0.7, 0.2)) == pytest.approx(expected, rel=1e-13)
    with pytest.raises(StructuralError):
        pinn_loss(m, p, data, collocation=[0.5])


@pytest.mark.parametrize("pair", [("HRPINN", "NODE", "none"), ("PHRPINN", "PNODE", "robust"),
                                  ("PHRPINN", "PNODE", "fast")])
def test_zero_prior_collapses_bitwise(pair):
    grey, black, mode = pair
    s = make_system("nonlinear_spring")
    a = Model(ModelConfig(kind=grey, system="nonlinear_spring", projection_mode=mode, K=40,
                          hidden=(8, 8)), s.with_zero_prior())
    b = Model(ModelConfig(kind=black, system="nonlinear_spring", projection_mode=mode, K=40,
                          hidden=(8, 8)), s)
    for seed in range(3):
        pa, pb = a.init_params(seed), b.init_params(seed)
        np.testing.assert_array_equal(a.rollout(pa).trajectory.states,
                                      b.rollout(pb).trajectory.states)


def test_ensemble_rollout_matches_members():
    m = Model(ModelConfig(kind="PHRPINN", system="two_body", projection_mode="robust", K=15,
                          hidden=(6,)))
    ens = m.init_ensemble([0, 1, 2])
    stacked, _ = m.rollout_states(ens)
    for i in range(3):
        single = m.rollout(member_params(ens, i)).trajectory.states
        np.testing.assert_array_equal(np.asarray(stacked)[i], single)


@pytest.mark.parametrize("mode", ["robust", "fast"])
def test_projected_rollout_random_params_stay_feasible(mode):
    m = Model(ModelConfig(kind="PHRPINN", projection_mode=mode, K=30, hidden=(8,)))
    for seed in range(10):
        v = m.rollout(m.init_params(seed)).per_step_violation
        assert v.max() <= (1e-10 if mode == "robust" else 1e-3)


def test_divergence_raises_with_step_and_predict_gives_nan():
    # RK4 stage sums overflow to inf on the first step
    m = Model(ModelConfig(kind="NODE", system="lotka_volterra", K=200, hidden=(4,)))
    p = m.init_params(0)
    p["f"].biases[-1][:] = [1e308, 1e308]
    with np.errstate(over="ignore"), pytest.raises(DivergenceError, match="step 0"):
        m.rollout(p)
    _, states, _ = m.predict_members(p, m.system.x0, 0.0, 200)
    assert np.isnan(states).all()


def test_trace_lines():
    m = Model(ModelConfig(kind="PNODE", projection_mode="fast", K=3, hidden=(4,)))
    res = m.rollout(m.init_params(0), trace=True)
    assert [line.split(",")[:2] for line in res.diagnostics] == [["1", "fast"], ["2", "fast"],
                                                                 ["3", "fast"]]


def test_robot_arm_uses_known_input():
    m = Model(ModelConfig(kind="HRPINN", system="robot_arm", K=5, hidden=(4,)))
    assert m.net_sizes == (5, 4, 3)
    res = m.rollout(m.init_params(0))
    assert res.trajectory.states.shape == (6, 3)


@pytest.mark.parametrize("bad", [dict(kind="GRU"), dict(kind="PNODE"),
                                 dict(kind="NODE", projection_mode="fast"),
                                 dict(kind="NODE", integrator="leapfrog"),
                                 dict(kind="NODE", dt=0.0), dict(kind="NODE", hidden=()),
                                 dict(kind="HRPINN", soft_constraint_weight=-1.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"kind": "NODE", "width": 3})


def test_param_matching_pinn():
    m = Model(ModelConfig(kind="PINN", hidden=(32, 32)))
    target = nn.param_count(m.net_sizes)
    assert abs(nn.param_count(m.pinn_sizes) - target) <= 0.1 * target


def test_model_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(kind="PINN", system="rigid_body", K=10, hidden=(5,))
    p = Model(cfg).init_params(4)
    save_model(tmp_path / "m.json", cfg, p)
    cfg2, p2 = load_model(tmp_path / "m.json")
    assert cfg2 == cfg
    for k in p:
        for a, b in zip(p[k].flat(), p2[k].flat()):
            np.testing.assert_array_equal(a, b)


def test_loss_gradient_fd_single_kind():
    m = Model(ModelConfig(kind="PHRPINN", projection_mode="robust", K=5, hidden=(4,)))
    data = generate_reference(m.system, K=5)
    p = m.init_params(1)
    sizes = m.net_sizes
    flat = np.concatenate([a.ravel() for a in p["f"].flat()])

    def f(v):
        arrays, k = [], 0
        for a in p["f"].flat():
            arrays.append(ad.reshape(ad.index(v, slice(k, k + a.size)), a.shape))
            k += a.size
        return m.loss({"f": nn.MlpParams.from_flat(sizes, arrays)}, data)

    _, (g,) = ad.value_and_grad(f, flat)
    h = 1e-6
    fd = np.array([(float(f(flat + h * e)) - float(f(flat - h * e))) / (2 * h)
                   for e in np.eye(flat.size)])
    assert rel_err(g, fd) < 1e-6


def test_loss_on_observed_subset():
    m = Model(ModelConfig(kind="HRPINN", K=20, hidden=(4,)))
    data = generate_reference(m.system, K=20)
    p = m.init_params(3)
    pred, _ = m.rollout_states(p, x0=data.states[0], t0=0.0, K=20)
    pred = ad.value_of(pred)
    idx = np.arange(5, 21, 5)
    want = np.mean((pred[idx] - data.states[idx]) ** 2)
    assert float(m.loss(p, data, observed=idx)) == pytest.approx(want, rel=1e-13)
    full = np.mean((pred[1:] - data.states[1:]) ** 2)
    assert float(m.loss(p, data, observed=np.arange(1, 21))) == pytest.approx(full, rel=1e-13)
    for bad in ([], [0], [21]):
        with pytest.raises(StructuralError, match="1..K"):
            m.loss(p, data, observed=bad)
    pinn = Model(ModelConfig(kind="PINN", K=20))
    with pytest.raises(StructuralError):
        pinn.loss(pinn.init_params(0, data), data, observed=idx)
