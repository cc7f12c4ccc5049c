import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrpinn import autodiff as ad
from hrpinn import nn
from hrpinn.errors import StructuralError

from conftest import rel_err
from oracles import mlp_numpy


@pytest.mark.parametrize("sizes,count", [((2, 16, 2), 82), ((1, 1), 2), ((7, 64, 64, 2), 4802)])
def test_param_count(sizes, count):
    assert nn.param_count(sizes) == count
    assert nn.param_count(nn.mlp_init(sizes, 0)) == count


def test_bias_zero_and_glorot_bounds():
    p = nn.mlp_init((1, 1), 5)
    assert p.biases[0][0] == 0.0
    p = nn.mlp_init((4, 30, 3), 1)
    for w, (a, b) in zip(p.weights, [(4, 30), (30, 3)]):
        assert np.abs(w).max() <= np.sqrt(6 / (a + b))


def test_init_deterministic():
    a, b = nn.mlp_init((3, 8, 2), 7), nn.mlp_init((3, 8, 2), 7)
    for x, y in zip(a.flat(), b.flat()):
        np.testing.assert_array_equal(x, y)
    c = nn.mlp_init((3, 8, 2), 8)
    assert not np.array_equal(a.weights[0], c.weights[0])


@pytest.mark.parametrize("sizes", [(), (3,), (3, 0, 1)])
def test_bad_sizes(sizes):
    with pytest.raises(StructuralError):
        nn.mlp_init(sizes, 0)


def test_zero_net_gives_zero():
    p = nn.mlp_init((3, 5, 2), 0)
    p = nn.MlpParams(p.layer_sizes, [w * 0 for w in p.weights], p.biases)
    np.testing.assert_array_equal(nn.mlp_forward(p, np.array([1.0, -2.0, 3.0])), 0.0)


def test_identity_layer():
    p = nn.MlpParams((2, 2), [np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(nn.mlp_forward(p, np.array([1.0, 2.0])), [1.0, 2.0])


def test_hand_set_hidden_layer():
    # 1 -> 2 -> 1: h = tanh([0.5x, -x] + [0, 0.1]); y = 2 h0 - h1 + 0.3
    p = nn.MlpParams((1, 2, 1), [np.array([[0.5, -1.0]]), np.array([[2.0], [-1.0]])],
                     [np.array([0.0, 0.1]), np.array([0.3])])
    x = 0.8
    expected = 2 * np.tanh(0.4) - np.tanh(-0.8 + 0.1) + 0.3
    assert float(nn.mlp_forward(p, np.array([x]))[0]) == pytest.approx(expected, abs=1e-15)


def test_width_mismatch():
    with pytest.raises(StructuralError):
        nn.mlp_forward(nn.mlp_init((3, 4, 1), 0), np.ones(2))


def test_shape_validation():
    with pytest.raises(StructuralError):
        nn.MlpParams((2, 3), [np.ones((3, 2))], [np.zeros(3)])


@given(seed=st.integers(0, 2**31), x=arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_forward_matches_numpy_oracle(seed, x):
    p = nn.mlp_init((3, 7, 6, 2), seed)
    p.biases[0][:] = np.linspace(-1, 1, 7)
    out = nn.mlp_forward(p, x)
    np.testing.assert_allclose(out, mlp_numpy(p.weights, p.biases, x), rtol=1e-13, atol=1e-14)


def test_fused_vjp_matches_composed_ops(rng):
    p = nn.mlp_init((3, 9, 9, 2), 3)
    p.biases[1][:] = rng.normal(size=9)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 2))

    def grads(fwd):
        with ad.Tape() as tape:
            q = p.bind(tape)
            xl = tape.leaf(x)
            y = ad.sum(ad.mul(fwd(q, xl), w))
        g = ad.backward(tape, root=y)
        return [g[a] for a in q.flat()] + [g[xl]]

    for a, b in zip(grads(nn.mlp_forward), grads(nn.mlp_forward_layers)):
        assert rel_err(a, b) < 1e-13


def test_fd_check_on_params(rng):
    sizes = (2, 6, 1)
    p = nn.mlp_init(sizes, 4)
    flat = np.concatenate([a.ravel() for a in p.flat()])
    x = rng.normal(size=(3, 2))

    def f(v):
        arrays, k = [], 0
        for a in p.flat():
            arrays.append(ad.reshape(ad.index(v, slice(k, k + a.size)), a.shape))
            k += a.size
        return ad.sum(nn.mlp_forward(nn.MlpParams.from_flat(sizes, arrays), x))

    assert ad.finite_difference_check(f, flat) < 1e-5


def test_ensemble_forward_matches_members(rng):
    members = [nn.mlp_init((3, 5, 2), s) for s in range(3)]
    ens = nn.stack_members(members)
    x = rng.normal(size=(3, 4, 3))
    out = nn.mlp_forward(ens, x)
    for i, m in enumerate(members):
        np.testing.assert_allclose(out[i], nn.mlp_forward(m, x[i]), rtol=1e-14)
        np.testing.assert_array_equal(ens.member(i).weights[0], m.weights[0])


def test_match_width_within_tolerance():
    w = nn.match_width(2, 2, 4802)
    count = nn.param_count(nn.hidden_sizes(2, 2, w))
    assert abs(count - 4802) <= 0.1 * 4802
    with pytest.raises(StructuralError):
        nn.match_width(50, 50, 10)


def test_checkpoint_roundtrip(tmp_path):
    p = nn.mlp_init((2, 5, 3), 9)
    path = tmp_path / "m.json"
    nn.save(p, path)
    q = nn.load(path)
    assert q.layer_sizes == p.layer_sizes
    for a, b in zip(p.flat(), q.flat()):
        np.testing.assert_array_equal(a, b)
    assert nn.dumps(q) == path.read_text()
    d = json.loads(path.read_text())
    assert d["format"] == "hrpinn-mlp" and d["version"] == 1


def test_checkpoint_rejects_foreign():
    with pytest.raises(StructuralError):
        nn.from_dict({"format": "other", "version": 1})
    d = nn.to_dict(nn.mlp_init((1, 1), 0))
    d["version"] = 99
    with pytest.raises(StructuralError):
        nn.from_dict(d)
