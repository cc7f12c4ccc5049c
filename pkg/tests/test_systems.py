import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrpinn import autodiff as ad
from hrpinn import systems as sy
from hrpinn.errors import (ConstraintQualificationError, DomainError, SingularityError,
                           StructuralError)
from hrpinn.integrate import generate_reference

NAMES = sorted(sy.SYSTEMS)


def _states(system, rng, count):
    """Random in-domain states scattered around the initial condition."""
    x = system.x0 + 0.2 * rng.normal(size=(count, system.n))
    if system.name == "lotka_volterra":
        x = np.abs(x) + 0.1
    return x


def test_mass_spring_examples():
    s = sy.make_system("mass_spring")
    np.testing.assert_array_equal(sy.eval_full(s, np.array([1.0, 0.0])), [0.0, -1.0])
    np.testing.assert_array_equal(sy.eval_prior(s, np.array([1.0, 2.0])), [2.0, 0.0])
    np.testing.assert_array_equal(sy.eval_residual_target(s, np.array([1.0, 2.0])), [0.0, -1.0])
    assert s.offset[0] == 0.5
    assert float(sy.eval_constraint(s, np.array([1.0, 0.0]))[0]) == 0.0
    assert float(sy.eval_constraint(s, np.array([2.0, 0.0]))[0]) == 1.5
    np.testing.assert_array_equal(sy.eval_constraint_jacobian(s, np.array([1.0, 0.0])), [[1.0, 0.0]])


def test_two_body_examples():
    s = sy.make_system("two_body", x0=(1.0, 0.0, 0.0, 1.0))
    x = np.array([1.0, 0.0, 0.0, 1.0])
    np.testing.assert_allclose(sy.eval_full(s, x), [0.0, 1.0, -1.0, 0.0], atol=1e-15)
    assert s.offset[0] == 1.0
    np.testing.assert_allclose(sy.eval_constraint(s, x), 0.0, atol=1e-15)
    G = sy.eval_constraint_jacobian(s, x)
    np.testing.assert_array_equal(G[0], [1.0, 0.0, 0.0, 1.0])


def test_two_body_singular():
    s = sy.make_system("two_body")
    with pytest.raises(SingularityError):
        sy.eval_full(s, np.zeros(4))


def test_rigid_body_examples():
    s = sy.make_system("rigid_body")
    np.testing.assert_array_equal(sy.eval_full(s, np.array([1.0, 0.0, 0.0])), 0.0)
    np.testing.assert_array_equal(sy.eval_prior(s, np.array([0.3, -2.0, 1.0])), 0.0)
    assert float(sy.eval_constraint(s, s.x0)[0]) == pytest.approx(0.0, abs=1e-15)
    assert 0.5 * s.x0 @ s.x0 == pytest.approx(0.5)


def test_robot_arm_residual_zero(rng):
    s = sy.make_system("robot_arm")
    for x in _states(s, rng, 5):
        np.testing.assert_array_equal(sy.eval_residual_target(s, x, 0.3, s.inputs_at(0.3)), 0.0)
    np.testing.assert_allclose(sy.eval_constraint(s, s.x0, s.t0), 0.0, atol=1e-12)


def test_robot_arm_singular():
    s = sy.make_system("robot_arm")
    with pytest.raises(SingularityError):
        sy.eval_full(s, np.zeros(3), 0.0, s.inputs_at(0.0))


def test_lotka_volterra_domain():
    s = sy.make_system("lotka_volterra")
    with pytest.raises(DomainError):
        sy.eval_constraint(s, np.array([-1.0, 1.0]))


def test_rank_deficiency_detected():
    s = sy.make_system("mass_spring")
    with pytest.raises(ConstraintQualificationError):
        sy.eval_constraint_jacobian(s, np.zeros(2))


def test_bad_dimension_and_name():
    with pytest.raises(StructuralError):
        sy.eval_full(sy.make_system("mass_spring"), np.ones(3))
    with pytest.raises(StructuralError):
        sy.make_system("pendulum")


@pytest.mark.parametrize("name", NAMES)
def test_split_consistency(name):
    s = sy.make_system(name)
    rng = np.random.default_rng(0)
    X = _states(s, rng, 1000)
    for k in range(0, 1000, 10):
        t = 0.01 * k
        w = s.inputs_at(t)
        f = np.asarray(ad.value_of(sy.eval_full(s, X[k:k + 10], t, w)))
        p = np.asarray(ad.value_of(sy.eval_prior(s, X[k:k + 10], t, w)))
        r = np.asarray(ad.value_of(sy.eval_residual_target(s, X[k:k + 10], t, w)))
        assert np.abs(p + r - f).max() < 1e-12


@pytest.mark.parametrize("name", NAMES)
def test_jacobian_matches_fd(name):
    s = sy.make_system(name)
    rng = np.random.default_rng(1)
    h = 1e-6
    for x in _states(s, rng, 20):
        G = sy.eval_constraint_jacobian(s, x, 0.7, check_rank=False)
        fd = np.stack([(np.asarray(sy.eval_constraint(s, x + h * e, 0.7))
                        - np.asarray(sy.eval_constraint(s, x - h * e, 0.7))) / (2 * h)
                       for e in np.eye(s.n)], axis=-1)
        assert np.abs(G - fd).max() / max(np.abs(G).max(), 1e-12) < 1e-6


@pytest.mark.parametrize("name", NAMES)
def test_hessian_matches_fd(name):
    s = sy.make_system(name)
    x = _states(s, np.random.default_rng(2), 1)[0]
    h = 1e-5
    H = sy.eval_constraint_hessian(s, x, 0.2)
    fd = np.stack([(sy.eval_constraint_jacobian(s, x + h * e, 0.2, False)
                    - sy.eval_constraint_jacobian(s, x - h * e, 0.2, False)) / (2 * h)
                   for e in np.eye(s.n)], axis=-1)
    assert np.abs(H - fd).max() < 1e-6 * max(1.0, np.abs(H).max())


@pytest.mark.parametrize("name", NAMES)
def test_offset_zero_at_x0(name):
    s = sy.make_system(name)
    assert np.abs(np.asarray(sy.eval_constraint(s, s.x0, s.t0))).max() < 1e-12


@pytest.mark.parametrize("name", NAMES)
def test_conservation_under_accurate_flow(name):
    s = sy.make_system(name)
    ref = generate_reference(s, K=200, projected=False, dt=0.0025)
    g = np.asarray(s.g_raw(ref.states, ref.times)) - s.offset
    # RK4 at this step has local error ~1e-11; drift stays tiny
    assert np.abs(g).max() < 1e-7


@given(x=st.floats(-3, 3), v=st.floats(-3, 3))
def test_arm_fused_field_matches_fd(x, v):
    s = sy.make_system("robot_arm")
    theta = s.x0 + 0.1 * np.array([x, v, x - v])
    w = s.inputs_at(0.4)
    J = np.linalg.svd(sy.eval_constraint_jacobian(s, theta, 0.4, False), compute_uv=False)
    if J.min() < 1e-2:
        return
    assert ad.finite_difference_check(
        lambda th: ad.sum(ad.mul(sy.eval_full(s, th, 0.4, w), np.array([1.0, -0.5, 2.0]))),
        theta) < 1e-5


def test_trajectory_csv_roundtrip(tmp_path):
    s = sy.make_system("robot_arm")
    ref = generate_reference(s, K=5)
    path = tmp_path / "t.csv"
    ref.to_csv(path)
    back = sy.Trajectory.from_csv(path)
    np.testing.assert_array_equal(back.states, ref.states)
    np.testing.assert_array_equal(back.inputs, ref.inputs)
    assert path.read_text().splitlines()[0] == "t,x0,x1,x2,w0,w1"


def test_trajectory_validation():
    with pytest.raises(StructuralError):
        sy.Trajectory([0.0, 0.1, 0.3], np.zeros((3, 2)))
    with pytest.raises(StructuralError):
        sy.Trajectory([0.0, 0.1], [[0.0, np.nan], [0.0, 0.0]])
