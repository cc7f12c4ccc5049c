import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrpinn import autodiff as ad
from hrpinn.errors import DivergenceError, StateError, StructuralError

from conftest import rel_err

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_square_forward_backward():
    with ad.Tape() as tape:
        x = tape.leaf(3.0)
        y = ad.mul(x, x)
    assert ad.forward(tape, root=y) == 9.0
    assert ad.backward(tape, root=y)[x] == 6.0


def test_tanh_at_origin():
    with ad.Tape() as tape:
        x = tape.leaf(0.0)
        y = ad.tanh(x)
    assert float(y.value) == 0.0
    assert float(ad.backward(tape, root=y)[x]) == 1.0


def test_linear_combo_hand_value():
    with ad.Tape() as tape:
        x, y = tape.leaf(1.0), tape.leaf(2.0)
        z = ad.add(x, ad.mul(2.0, y))
    assert float(ad.forward(tape, root=z)) == 5.0


def test_product_rule():
    val, (g,) = ad.value_and_grad(lambda v: ad.mul(ad.index(v, 0), ad.index(v, 1)),
                                  np.array([2.0, 5.0]))
    assert val == 10.0
    np.testing.assert_array_equal(g, [5.0, 2.0])


def test_replay_uses_new_bindings():
    with ad.Tape() as tape:
        x = tape.leaf(np.array([1.0, 2.0]))
        y = ad.sum(ad.square(x))
    assert float(ad.forward(tape, {x: np.array([3.0, 4.0])}, root=y)) == 25.0
    np.testing.assert_array_equal(ad.backward(tape, root=y)[x], [6.0, 8.0])


def test_backward_before_forward_is_state_error():
    with ad.Tape() as tape:
        x = tape.leaf(1.0)
        y = ad.exp(x)
    tape.invalidate()
    with pytest.raises(StateError):
        ad.backward(tape, root=y)


def test_shape_mismatch_on_replay():
    with ad.Tape() as tape:
        x = tape.leaf(np.ones(3))
        y = ad.sum(x)
    with pytest.raises(StructuralError):
        ad.forward(tape, {x: np.ones(4)}, root=y)


def test_nonfinite_names_node():
    with ad.Tape() as tape:
        x = tape.leaf(1.0, name="x")
        y = ad.log(x)
    with pytest.raises(DivergenceError, match="log"):
        ad.forward(tape, {x: -1.0}, root=y)


def test_nonfinite_at_record_time():
    with ad.Tape() as tape:
        x = tape.leaf(0.0)
        with pytest.raises(DivergenceError):
            ad.log(x)


def test_closed_tape_rejects_nodes():
    with ad.Tape() as tape:
        x = tape.leaf(1.0)
    with pytest.raises(StateError):
        ad.add(x, 1.0)


def test_seed_shape_checked():
    with ad.Tape() as tape:
        x = tape.leaf(np.ones(2))
        y = ad.mul(x, 2.0)
    with pytest.raises(StructuralError):
        ad.backward(tape, seed=np.ones(3), root=y)


def test_operands_on_different_tapes():
    with ad.Tape() as t1:
        a = t1.leaf(1.0)
    with ad.Tape() as t2:
        b = t2.leaf(1.0)
        with pytest.raises(StructuralError):
            ad.add(a, b)


def test_fd_check_square_and_constant():
    assert ad.finite_difference_check(lambda x: ad.square(x), 3.0) < 1e-6
    assert ad.finite_difference_check(lambda x: ad.mul(0.0, ad.sum(x)), np.ones(3)) == 0.0


def test_fd_check_tanh_mlp(rng):
    W1, W2 = rng.normal(size=(3, 5)), rng.normal(size=(5, 1))

    def f(x):
        return ad.sum(ad.matmul(ad.tanh(ad.matmul(x, W1)), W2))

    assert ad.finite_difference_check(f, rng.normal(size=3)) < 1e-5


def test_non_numeric_f_gives_zero_grad():
    val, grads = ad.value_and_grad(lambda x: 4.0, np.ones(2))
    assert float(val) == 4.0
    np.testing.assert_array_equal(grads[0], 0.0)


UNARY = {
    "tanh": (ad.tanh, lambda x: x),
    "softplus": (ad.softplus, lambda x: x),
    "log": (ad.log, lambda x: np.abs(x) + 0.5),
    "exp": (ad.exp, lambda x: x),
    "sqrt": (ad.sqrt, lambda x: np.abs(x) + 0.5),
    "arcsinh": (ad.arcsinh, lambda x: x),
    "sin": (ad.sin, lambda x: x),
    "cos": (ad.cos, lambda x: x),
    "square": (ad.square, lambda x: x),
    "reciprocal": (ad.reciprocal, lambda x: np.abs(x) + 0.5),
    "neg": (ad.neg, lambda x: x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, 4, elements=finite))
def test_unary_primitives_match_fd(name, x):
    op, domain = UNARY[name]
    x = domain(x)
    w = np.array([0.3, -1.1, 0.7, 2.0])
    assert ad.finite_difference_check(lambda v: ad.sum(ad.mul(op(v), w)), x) < 1e-5 or \
        rel_err(*_grads(op, x, w)) < 1e-7


def _grads(op, x, w):
    _, (g,) = ad.value_and_grad(lambda v: ad.sum(ad.mul(op(v), w)), x)
    h = 1e-6
    fd = np.array([(np.sum(op(x + h * e) * w) - np.sum(op(x - h * e) * w)) / (2 * h)
                   for e in np.eye(len(x))])
    return g, fd


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 0.5)),
    "cross": lambda a, b: ad.cross(ad.index(a, slice(0, 3)), ad.index(b, slice(0, 3))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(a=arrays(np.float64, 4, elements=finite), b=arrays(np.float64, 4, elements=finite))
def test_binary_primitives_match_fd(name, a, b):
    op = BINARY[name]
    w = np.array([0.5, -0.2, 1.3, 0.9])

    def f(v):
        x, y = ad.index(v, slice(0, 4)), ad.index(v, slice(4, 8))
        out = op(x, y)
        return ad.sum(ad.mul(out, w[: np.shape(ad.value_of(out))[-1]]))

    _, (g,) = ad.value_and_grad(f, np.concatenate([a, b]))
    v0 = np.concatenate([a, b])
    h = 1e-6
    fd = np.array([(float(f(v0 + h * e)) - float(f(v0 - h * e))) / (2 * h) for e in np.eye(8)])
    assert rel_err(g, fd) < 1e-6 or np.abs(g - fd).max() < 1e-8


def test_structural_ops_match_fd(rng):
    A = rng.normal(size=(3, 4))

    def f(v):
        m = ad.reshape(v, (3, 4))
        t = ad.transpose(m)
        c = ad.concat([ad.index(t, (slice(None), 0)), ad.index(t, (1, slice(None)))])
        s = ad.stack([ad.mean(m, axis=0), ad.sum(m, axis=0)], axis=0)
        p = ad.matmul(m, ad.transpose(s))
        return ad.add(ad.sum(ad.square(c)), ad.mean(ad.mul(p, 1.7)))

    assert ad.finite_difference_check(f, A.ravel()) < 1e-5


def test_batched_matmul_vjp(rng):
    A, B = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    _, (ga, gb) = ad.value_and_grad(lambda a, b: ad.sum(ad.square(ad.matmul(a, b))), A, B)
    C = A @ B
    np.testing.assert_allclose(ga, 2 * C @ np.swapaxes(B, -1, -2), rtol=1e-12)
    np.testing.assert_allclose(gb, 2 * np.swapaxes(A, -1, -2) @ C, rtol=1e-12)


def test_fancy_index_accumulates():
    _, (g,) = ad.value_and_grad(lambda v: ad.sum(ad.index(v, np.array([0, 0, 2]))),
                                np.zeros(3))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_tuple_axis_mean():
    _, (g,) = ad.value_and_grad(lambda v: ad.sum(ad.mean(v, axis=(-2, -1))), np.ones((2, 3, 4)))
    np.testing.assert_allclose(g, np.full((2, 3, 4), 1 / 12))


@given(alpha=finite, beta=finite, x=arrays(np.float64, 3, elements=finite))
def test_linearity_of_backward(alpha, beta, x):
    f = lambda v: ad.sum(ad.tanh(v))  # noqa: E731
    g = lambda v: ad.sum(ad.mul(v, v))  # noqa: E731
    _, (gf,) = ad.value_and_grad(f, x)
    _, (gg,) = ad.value_and_grad(g, x)
    _, (gc,) = ad.value_and_grad(lambda v: ad.add(ad.mul(alpha, f(v)), ad.mul(beta, g(v))), x)
    np.testing.assert_allclose(gc, alpha * gf + beta * gg, rtol=1e-12, atol=1e-12)


def test_replay_is_bit_identical(rng):
    x0 = rng.normal(size=5)
    with ad.Tape() as tape:
        x = tape.leaf(x0)
        y = ad.sum(ad.softplus(ad.mul(ad.sin(x), ad.exp(x))))
    v1, g1 = float(y.value), ad.backward(tape, root=y)[x].copy()
    ad.forward(tape, {x: x0 + 1.0}, root=y)
    ad.forward(tape, {x: x0}, root=y)
    assert float(y.value) == v1
    np.testing.assert_array_equal(ad.backward(tape, root=y)[x], g1)
