"""Tanh multilayer perceptrons and their checkpoint format.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer is
``x @ W + b``; inputs may be a single vector or a batch of row vectors.

An *ensemble* stacks ``S`` independent networks along a leading member axis
(``W`` of shape ``(S, fan_in, fan_out)``).  Its inputs must carry the same
leading axis, ``(S, n_in)`` or ``(S, N, n_in)``, and member ``i`` only ever
sees row ``i``.

Checkpoint format (``hrpinn-mlp``, version 1) is a JSON document::

    {"format": "hrpinn-mlp", "version": 1, "layer_sizes": [...],
     "weights": [[row-major floats], ...], "biases": [[...], ...]}

Floats are written with ``repr`` (shortest round-trip form) and keys are
sorted, so identical parameters always serialize to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import StructuralError

CHECKPOINT_FORMAT = "hrpinn-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    layer_sizes: tuple
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise StructuralError("an MLP needs at least an input and an output layer")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise StructuralError("weights/biases do not match layer_sizes")
        lead = tuple(np.shape(self.weights[0]))[:-2] if self.weights else ()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            if tuple(np.shape(w)) != lead + (n_in, n_out) or tuple(np.shape(b)) != lead + (n_out,):
                raise StructuralError(
                    f"layer {i}: expected W{lead + (n_in, n_out)} b{lead + (n_out,)}, "
                    f"got W{tuple(np.shape(w))} b{tuple(np.shape(b))}"
                )
        if len(lead) > 1:
            raise StructuralError("only one leading ensemble axis is supported")
        self.members = lead[0] if lead else None

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def flat(self):
        """Parameters in layer order, W before b."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_flat(cls, layer_sizes, arrays):
        arrays = list(arrays)
        return cls(layer_sizes, arrays[0::2], arrays[1::2])

    def bind(self, tape, prefix="mlp"):
        """Copy of these params whose arrays are leaves on ``tape``."""
        leaves = [
            tape.leaf(a, name=f"{prefix}.{'W' if k % 2 == 0 else 'b'}{k // 2}")
            for k, a in enumerate(self.flat())
        ]
        return MlpParams.from_flat(self.layer_sizes, leaves)

    def member(self, i):
        if self.members is None:
            raise StructuralError("not an ensemble")
        return MlpParams(self.layer_sizes, [np.array(ad.value_of(w)[i]) for w in self.weights],
                         [np.array(ad.value_of(b)[i]) for b in self.biases])

    def numeric(self):
        return MlpParams.from_flat(
            self.layer_sizes, [np.array(ad.value_of(a), dtype=np.float64) for a in self.flat()]
        )


def stack_members(params_list):
    """Ensemble from independent networks with identical layer sizes."""
    sizes = {p.layer_sizes for p in params_list}
    if len(sizes) != 1:
        raise StructuralError("ensemble members must share layer sizes")
    return MlpParams(sizes.pop(), [np.stack(ws) for ws in zip(*(p.weights for p in params_list))],
                     [np.stack(bs) for bs in zip(*(p.biases for p in params_list))])


def mlp_init(layer_sizes, seed):
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    layer_sizes = tuple(layer_sizes)
    if len(layer_sizes) < 2:
        raise StructuralError("layer_sizes needs at least two entries")
    if any(int(n) < 1 for n in layer_sizes):
        raise StructuralError(f"layer widths must be >= 1, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpParams(layer_sizes, weights, biases)


def _mlp_fwd(x, *wb):
    x = np.asarray(x, dtype=np.float64)
    ens = wb[0].ndim == 3
    if ens:
        if x.shape[0] != wb[0].shape[0]:
            raise ValueError("ensemble input needs a leading member axis")
        h = x.reshape(x.shape[0], -1, x.shape[-1])
        bias = [b[:, None, :] for b in wb[1::2]]
    else:
        h = x
        bias = list(wb[1::2])
    acts = [h]
    last = len(wb) // 2 - 1
    for i in range(last + 1):
        h = h @ wb[2 * i] + bias[i]
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    out = h.reshape(x.shape[:-1] + (h.shape[-1],)) if ens else h
    return out, acts


def _mlp_vjp(g, out, args, attrs, saved):
    acts = saved
    x, wb = args[0], args[1:]
    L = len(wb) // 2
    grads = [None] * (2 * L)
    ens = wb[0].ndim == 3
    g = np.asarray(g, dtype=np.float64)
    if ens:
        g = g.reshape(acts[-1].shape)
    for i in range(L - 1, -1, -1):
        if i < L - 1:
            g = g * (1.0 - acts[i + 1] * acts[i + 1])
        a = acts[i]
        W = wb[2 * i]
        if ens:
            grads[2 * i] = np.swapaxes(a, 1, 2) @ g
            grads[2 * i + 1] = g.sum(axis=1)
            g = g @ np.swapaxes(W, 1, 2)
        elif a.ndim == 1:
            grads[2 * i] = np.outer(a, g)
            grads[2 * i + 1] = g
            g = W @ g
        else:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * i] = a2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ W.T
    return [g.reshape(np.shape(x))] + grads


# one tape node per network evaluation instead of one per layer operation
P_MLP = ad.Primitive("mlp", _mlp_fwd, _mlp_vjp, saves=True)


def mlp_forward(params, x):
    """tanh on hidden layers, identity output.  Records if anything is a Tensor."""
    width = np.shape(ad.value_of(x))[-1] if np.ndim(ad.value_of(x)) else 1
    if width != params.n_in:
        raise StructuralError(f"input width {width} != first layer size {params.n_in}")
    return P_MLP(x, *params.flat())


def mlp_forward_layers(params, x):
    """Same network built from elementary operations; used as a test oracle."""
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.tanh(h)
    return h


def param_count(params_or_sizes):
    sizes = getattr(params_or_sizes, "layer_sizes", params_or_sizes)
    return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))


def hidden_sizes(n_in, n_out, width, depth=2):
    return (n_in,) + (width,) * depth + (n_out,)


def match_width(n_in, n_out, target, depth=2, tolerance=0.10):
    """Hidden width whose parameter count is closest to ``target``.

    Raises ``StructuralError`` if no width lands within ``tolerance`` of it.
    """
    best = None
    for width in range(1, 4097):
        count = param_count(hidden_sizes(n_in, n_out, width, depth))
        err = abs(count - target)
        if best is None or err < best[1]:
            best = (width, err)
        if count > target * (1 + tolerance):
            break
    width, err = best
    if err > tolerance * target:
        raise StructuralError(
            f"no width within {tolerance:.0%} of {target} params for ({n_in}->{n_out}, depth {depth})"
        )
    return width


def to_dict(params):
    p = params.numeric()
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(p.layer_sizes),
        "weights": [[float(v) for v in w.ravel()] for w in p.weights],
        "biases": [[float(v) for v in b] for b in p.biases],
    }


def from_dict(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise StructuralError(f"not an {CHECKPOINT_FORMAT} checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise StructuralError(f"unsupported checkpoint version {d.get('version')}")
    sizes = tuple(d["layer_sizes"])
    weights = [
        np.array(w, dtype=np.float64).reshape(n_in, n_out)
        for w, n_in, n_out in zip(d["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.array(b, dtype=np.float64) for b in d["biases"]]
    return MlpParams(sizes, weights, biases)


def dumps(params):
    return json.dumps(to_dict(params), sort_keys=True, indent=1) + "\n"


def save(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(params))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
