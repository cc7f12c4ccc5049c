"""Recurrent grey-box/black-box models and the PINN baseline.

Rollout models share one recurrent cell

    h_{k+1} = Phi_dt(h_k; f_hat)                 NODE
    h_{k+1} = Phi_dt(h_k; f_prior + f_hat)       HRPINN
    ... followed by a projection onto g = 0      PNODE / PHRPINN

where ``f_hat`` is an MLP on ``concat(h, w)``.  The PINN baseline instead fits
``x_hat(t)`` directly and penalizes the ODE residual (with its own residual
network) and the invariant at the collocation points.

Parameters are a dict of :class:`~hrpinn.nn.MlpParams`: ``{"f": ...}`` for the
rollout models, ``{"x": ..., "f": ...}`` for PINN.  Passing ensemble
parameters (a leading member axis, see :func:`Model.init_ensemble`) runs every
member in one vectorized pass; losses then come back per member.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DivergenceError, StructuralError
from .integrate import INTEGRATORS, get_integrator
from .projection import project
from .systems import SYSTEMS, Trajectory, constraint_fns, make_system

KINDS = ("NODE", "PNODE", "HRPINN", "PHRPINN", "PINN")
PROJECTED = ("PNODE", "PHRPINN")
USES_PRIOR = ("HRPINN", "PHRPINN", "PINN")

MODEL_CHECKPOINT_FORMAT = "hrpinn-model"
MODEL_CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str
    system: str = "mass_spring"
    projection_mode: str = "none"
    soft_constraint: bool = False
    soft_constraint_weight: float = 1.0
    integrator: str = "rk4"
    hidden: tuple = (32, 32)
    pinn_hidden: Optional[tuple] = None
    dt: float = 0.01
    K: int = 1000
    projection_tol: float = 1e-10
    projection_backward: str = "auto"
    lambda_diff: float = 1.0
    lambda_alg: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.pinn_hidden is not None:
            self.pinn_hidden = tuple(int(h) for h in self.pinn_hidden)
        self.validate()

    def validate(self):
        p = []
        if self.kind not in KINDS:
            p.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.system not in SYSTEMS:
            p.append(f"unknown system {self.system!r}")
        if self.projection_mode not in ("none", "fast", "robust"):
            p.append(f"projection_mode must be none|fast|robust, got {self.projection_mode!r}")
        elif self.kind in PROJECTED and self.projection_mode == "none":
            p.append(f"{self.kind} needs projection_mode fast or robust")
        elif self.kind not in PROJECTED and self.kind in KINDS and self.projection_mode != "none":
            p.append(f"{self.kind} does not project; projection_mode must be none")
        if self.soft_constraint_weight < 0:
            p.append("soft_constraint_weight must be >= 0")
        if self.integrator not in INTEGRATORS:
            p.append(f"integrator must be euler|rk4, got {self.integrator!r}")
        if not self.dt > 0:
            p.append("dt must be positive")
        if self.K < 1:
            p.append("K must be >= 1")
        if not self.hidden or min(self.hidden) < 1:
            p.append("hidden widths must be >= 1")
        if self.projection_backward not in ("auto", "exact", "fast"):
            p.append("projection_backward must be auto|exact|fast")
        if self.lambda_diff < 0 or self.lambda_alg < 0:
            p.append("PINN loss weights must be >= 0")
        if p:
            raise ConfigError(p)

    @property
    def label(self):
        """Short display name, e.g. ``PHRPINN-robust`` or ``HRPINN-soft``."""
        if self.kind in PROJECTED:
            return f"{self.kind}-{self.projection_mode}"
        if self.kind == "HRPINN" and self.soft_constraint:
            return "HRPINN-soft"
        return self.kind

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["pinn_hidden"] = None if self.pinn_hidden is None else list(self.pinn_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError([f"unknown model field {k!r}" for k in extra])
        return cls(**d)


@dataclass
class RolloutResult:
    trajectory: Trajectory
    per_step_violation: np.ndarray
    diagnostics: list = field(default_factory=list)
    states: object = None  # stacked states; a Tensor when recorded on a tape


def violation(system, states, times):
    """Per-sample ``max_i |g_i|`` for states ``(..., K+1, n)`` on ``times``."""
    g = np.asarray(system.g_raw(states, times), dtype=np.float64) - system.offset
    return np.abs(g).max(axis=-1)


def _members(params):
    return params["f"].members


class Model:
    """A :class:`ModelConfig` bound to a concrete system instance."""

    def __init__(self, config, system=None):
        self.config = config
        self.system = system if system is not None else make_system(config.system)

    # -- parameters -------------------------------------------------------

    @property
    def net_sizes(self):
        s = self.system
        return (s.n + s.d,) + self.config.hidden + (s.n,)

    @property
    def pinn_sizes(self):
        c, s = self.config, self.system
        if c.pinn_hidden is not None:
            hidden = c.pinn_hidden
        else:
            # trajectory network gets the same budget as the rollout network
            depth = len(c.hidden)
            width = nn.match_width(1, s.n, nn.param_count(self.net_sizes), depth=depth)
            hidden = (width,) * depth
        return (1,) + tuple(hidden) + (s.n,)

    def init_params(self, seed, data=None):
        """Glorot init.  Given training ``data``, the PINN output bias starts at
        the mean observed state so x_hat(t) does not begin at the origin (for
        the robot arm that is the singular straight-arm pose)."""
        params = {"f": nn.mlp_init(self.net_sizes, seed)}
        if self.config.kind == "PINN":
            params["x"] = nn.mlp_init(self.pinn_sizes, [int(seed), 1])
            if data is not None:
                params["x"].biases[-1][:] = np.mean(data.states, axis=0)
        return params

    def init_ensemble(self, seeds, data=None):
        singles = [self.init_params(s, data) for s in seeds]
        return stack_params(singles)

    # -- recurrent models -------------------------------------------------

    def _input_fn(self, inputs, t0):
        if inputs is None:
            return self.system.input_fn or (lambda t: None)
        if callable(inputs):
            return inputs
        arr = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        dt, last = self.config.dt, arr.shape[0] - 1

        def zoh(t):
            k = int(np.floor((t - t0) / dt + 1e-9))
            return arr[min(max(k, 0), last)]

        return zoh

    def cell_field(self, params, input_fn):
        f_net = params["f"]
        prior = self.system.prior if self.config.kind in USES_PRIOR else None

        def f(h, t):
            w = input_fn(t)
            if w is None:
                z = h
            else:
                w = np.broadcast_to(w, np.shape(ad.value_of(h))[:-1] + np.shape(w)[-1:])
                z = ad.concat([h, w], axis=-1)
            out = nn.mlp_forward(f_net, z)
            if prior is not None:
                out = ad.add(prior(h, t, w), out)
            return out

        return f

    def rollout_states(self, params, x0=None, inputs=None, t0=0.0, K=None, trace=False):
        """Unrolled hidden states, stacked to ``(K+1, n)`` or ``(S, K+1, n)``."""
        c, s = self.config, self.system
        if c.kind == "PINN":
            raise StructuralError("PINN has no recurrent rollout; use pinn_trajectory")
        K = c.K if K is None else int(K)
        S = _members(params)
        x0 = s.x0 if x0 is None else x0
        if np.shape(ad.value_of(x0))[-1:] != (s.n,):
            raise StructuralError(f"x0 must have last dimension {s.n}")
        if S is not None and np.ndim(ad.value_of(x0)) == 1:
            x0 = np.broadcast_to(x0, (S, s.n)).copy()
        if inputs is not None and not callable(inputs) and np.shape(inputs)[0] < K + 1:
            raise StructuralError("inputs do not cover the rollout horizon")
        stepper = get_integrator(c.integrator)
        f = self.cell_field(params, self._input_fn(inputs, t0))
        lines = [] if trace else None
        backward = None if c.projection_backward == "auto" else c.projection_backward
        h = x0
        states = [h]
        for k in range(K):
            t = t0 + k * c.dt
            try:
                h = stepper(f, h, t, c.dt, step=k)
                if c.kind in PROJECTED:
                    h = project(h, constraint_fns(s, t0 + (k + 1) * c.dt), mode=c.projection_mode,
                                backward=backward, tol=c.projection_tol, step=k + 1, trace=lines)
            except DivergenceError as exc:
                raise DivergenceError(f"rollout diverged at step {k}: {exc}", where=k) from exc
            states.append(h)
        return ad.stack(states, axis=0 if S is None else 1), (lines or [])

    def rollout(self, params, x0=None, inputs=None, t0=0.0, K=None, trace=False):
        """Single-network rollout with per-step violations and optional trace."""
        if _members(params) is not None:
            raise StructuralError("use rollout_members for ensemble parameters")
        K = self.config.K if K is None else int(K)
        stacked, lines = self.rollout_states(params, x0, inputs, t0, K, trace)
        times = t0 + self.config.dt * np.arange(K + 1)
        values = np.asarray(ad.value_of(stacked))
        return RolloutResult(Trajectory(times, values), violation(self.system, values, times),
                             lines, stacked)

    # -- losses -----------------------------------------------------------

    def loss(self, params, data, t0=None, observed=None):
        """Training objective on an observed trajectory.

        ``observed`` optionally lists the grid indices (1..K) that carry
        observations; the rollout still spans the whole grid.  Scalar for a
        single network, one entry per member for an ensemble.
        """
        c, s = self.config, self.system
        if c.kind == "PINN":
            if observed is not None:
                raise StructuralError("PINN trains on the full grid; observed is rollout-only")
            return pinn_loss(self, params, data, c.lambda_diff, c.lambda_alg)
        t0 = float(data.times[0]) if t0 is None else t0
        # a known input signal beats its zero-order-hold samples
        inputs = None if s.input_fn is not None else data.inputs
        pred, _ = self.rollout_states(params, x0=data.states[0], inputs=inputs, t0=t0, K=data.K)
        if observed is None:
            idx = slice(1, None)
        else:
            idx = np.asarray(observed, dtype=np.int64)
            if idx.size == 0 or idx.min() < 1 or idx.max() > data.K:
                raise StructuralError("observed indices must lie in 1..K")
        tail = ad.index(pred, (Ellipsis, idx, slice(None)))
        L = ad.mean(ad.square(ad.sub(tail, data.states[idx])), axis=(-2, -1))
        if c.soft_constraint and c.soft_constraint_weight > 0:
            gv = ad.sub(s.g_raw(pred, data.times), s.offset)
            L = ad.add(L, soft_constraint_penalty(gv, c.soft_constraint_weight))
        return L

    # -- numeric prediction ---------------------------------------------

    def predict_members(self, params, x0, t0, K, inputs=None, train_range=None):
        """Numeric predictions ``(S, K+1, n)`` (or ``(K+1, n)``) and violations.

        Members that fail produce NaN rows instead of raising.  PINN ignores
        ``x0`` and needs the time window it was trained on.
        """
        times = t0 + self.config.dt * np.arange(K + 1)
        if self.config.kind == "PINN":
            if train_range is None:
                raise StructuralError("PINN prediction needs its training time window")
            states = np.asarray(pinn_trajectory(params["x"], times, train_range))
        else:
            with np.errstate(all="ignore"):
                try:
                    stacked, _ = self.rollout_states(params, x0=x0, inputs=inputs, t0=t0, K=K)
                    states = np.asarray(stacked)
                except DivergenceError:
                    S = _members(params)
                    shape = (K + 1, self.system.n) if S is None else (S, K + 1, self.system.n)
                    states = np.full(shape, np.nan)
        with np.errstate(all="ignore"):
            viol = violation(self.system, states, times)
        return times, states, viol


def stack_params(param_dicts):
    """Ensemble parameter dict from a list of single-network dicts."""
    keys = sorted(param_dicts[0])
    return {k: nn.stack_members([p[k] for p in param_dicts]) for k in keys}


def member_params(params, i):
    return {k: v.member(i) for k, v in params.items()}


def rollout(config, params, x0=None, inputs=None, system=None, t0=0.0, trace=False):
    return Model(config, system).rollout(params, x0=x0, inputs=inputs, t0=t0, trace=trace)


def soft_constraint_penalty(g_values, weight):
    """``weight * mean_k ||g(h_k)||^2`` for g evaluated per step, shape ``(..., K+1, m)``."""
    if weight < 0:
        raise ConfigError("soft constraint weight must be >= 0")
    if weight == 0:
        return 0.0
    return ad.mul(weight, ad.mean(ad.sum(ad.square(g_values), axis=-1), axis=-1))


# --- PINN -------------------------------------------------------------------

def _scale(t_range):
    lo, hi = t_range
    half = 0.5 * (hi - lo)
    return 0.5 * (hi + lo), (half if half > 0 else 1.0)


def pinn_trajectory(params, t, t_range=(0.0, 1.0), with_derivative=False):
    """``x_hat(t)`` for a vector of times; optionally also ``d x_hat / dt``.

    Time is mapped affinely onto [-1, 1] over ``t_range``.  The derivative is
    pushed forward through the layers with ordinary tape operations, so it
    stays differentiable with respect to the parameters.  Ensemble parameters
    give ``(S, N, n)``.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    mid, half = _scale(t_range)
    h = (t - mid) / half
    dh = np.full_like(h, 1.0 / half)
    S = params.members
    if S is not None:
        h = np.broadcast_to(h, (S,) + h.shape).copy()
        dh = np.broadcast_to(dh, (S,) + dh.shape).copy()
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        if S is not None:
            b = ad.reshape(b, (S, 1, -1))
        z = ad.add(ad.matmul(h, W), b)
        dz = ad.matmul(dh, W) if with_derivative else None
        if i < last:
            h = ad.tanh(z)
            if with_derivative:
                dh = ad.mul(ad.sub(1.0, ad.square(h)), dz)
        else:
            h, dh = z, dz
    return (h, dh) if with_derivative else h


def pinn_loss(model, params, data, lambda_diff=1.0, lambda_alg=1.0, collocation=None):
    """Composite data + ODE-residual + invariant loss.

    Collocation defaults to the data grid.  Scalar for one network, one entry
    per member for an ensemble.
    """
    s = model.system
    t_range = (float(data.times[0]), float(data.times[-1]))
    x_hat = pinn_trajectory(params["x"], data.times, t_range)
    loss = ad.mean(ad.square(ad.sub(x_hat, data.states)), axis=(-2, -1))
    if lambda_diff == 0 and lambda_alg == 0:
        return loss
    tc = data.times if collocation is None else np.asarray(collocation, dtype=np.float64)
    if tc.min() < t_range[0] - 1e-12 or tc.max() > t_range[1] + 1e-12:
        raise StructuralError("collocation points must lie inside the data window")
    xc, dxc = pinn_trajectory(params["x"], tc, t_range, with_derivative=True)
    if lambda_diff:
        w = None
        if s.input_fn is not None:
            w = s.input_fn(tc)
        elif data.inputs is not None and collocation is None:
            w = data.inputs
        if w is None:
            z = xc
        else:
            w = np.broadcast_to(w, np.shape(ad.value_of(xc))[:-1] + np.shape(w)[-1:])
            z = ad.concat([xc, w], axis=-1)
        rhs = ad.add(s.prior(xc, tc, w), nn.mlp_forward(params["f"], z))
        r = ad.sub(dxc, rhs)
        loss = ad.add(loss, ad.mul(lambda_diff, ad.mean(ad.sum(ad.square(r), axis=-1), axis=-1)))
    if lambda_alg:
        gv = ad.sub(s.g_raw(xc, tc), s.offset)
        loss = ad.add(loss, ad.mul(lambda_alg, ad.mean(ad.sum(ad.square(gv), axis=-1), axis=-1)))
    return loss


# --- checkpoints ------------------------------------------------------------

def model_to_dict(config, params):
    return {
        "format": MODEL_CHECKPOINT_FORMAT,
        "version": MODEL_CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "networks": {k: nn.to_dict(v) for k, v in sorted(params.items())},
    }


def dumps_model(config, params):
    return json.dumps(model_to_dict(config, params), sort_keys=True, indent=1) + "\n"


def save_model(path, config, params):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(config, params))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != MODEL_CHECKPOINT_FORMAT:
        raise StructuralError(f"not an {MODEL_CHECKPOINT_FORMAT} checkpoint")
    if d.get("version") != MODEL_CHECKPOINT_VERSION:
        raise StructuralError(f"unsupported model checkpoint version {d.get('version')}")
    config = ModelConfig.from_dict(d["config"])
    params = {k: nn.from_dict(v) for k, v in d["networks"].items()}
    return config, params
