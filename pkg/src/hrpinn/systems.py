"""Benchmark constrained dynamical systems.

Six systems: Lotka-Volterra, mass-spring, two-body, nonlinear spring, planar
three-link robot arm and the free rigid body.  Each carries its full vector
field, a split into a known prior and an unknown residual, algebraic invariants
``g`` with analytic Jacobians and Hessians, and a default initial condition.

Vector fields and invariants are written with :mod:`hrpinn.autodiff`
operations on the last axis, so the same code evaluates a single state
``(n,)``, a batch ``(N, n)``, or taped tensors.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import (
    ConstraintQualificationError,
    DomainError,
    SingularityError,
    StructuralError,
)

RANK_TOL = 1e-10


def _col(x, i):
    return x[..., i]


def _zeros_like(x):
    return np.zeros(np.shape(ad.value_of(x)))


def _mat(rows, x):
    """Assemble a ``(..., m, n)`` array from entries broadcast over x's batch axes."""
    lead = np.shape(x)[:-1]
    return np.stack([np.stack([np.broadcast_to(np.asarray(v, dtype=np.float64), lead)
                               for v in row], -1) for row in rows], -2)


def _const_hess(H, x):
    return np.broadcast_to(H, np.shape(x)[:-1] + H.shape).copy()


def _cols(x):
    x = np.asarray(x, dtype=np.float64)
    return [x[..., i] for i in range(x.shape[-1])]


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n: int
    d: int
    m: int
    params: dict
    full: Callable
    prior: Callable
    residual: Callable
    g_raw: Callable
    jac: Callable
    hess: Callable
    x0: np.ndarray
    t0: float = 0.0
    offset: np.ndarray = field(default=None)
    input_fn: Optional[Callable] = None
    # invariants defined as "== 0" (robot arm) are never re-offset
    fixed_offset: bool = False
    dt: float = 0.01
    horizon: float = 10.0

    def inputs_at(self, t):
        if self.input_fn is None:
            return None
        return self.input_fn(t)

    def with_initial_state(self, x0, t0=None):
        """Copy with a new initial state and invariant offsets calibrated there."""
        x0 = np.array(x0, dtype=np.float64)
        if x0.shape != (self.n,):
            raise StructuralError(f"{self.name}: x0 must have shape ({self.n},)")
        t0 = self.t0 if t0 is None else float(t0)
        offset = np.zeros(self.m) if self.fixed_offset else np.asarray(
            self.g_raw(x0, t0), dtype=np.float64)
        return dataclasses.replace(self, x0=x0, t0=t0, offset=offset)

    def with_zero_prior(self):
        """Same system with everything moved into the residual."""
        full = self.full
        return dataclasses.replace(
            self,
            name=self.name + "_noprior",
            prior=lambda x, t, w: _zeros_like(x),
            residual=full,
        )


# --- evaluation API ---------------------------------------------------------

def _check_dim(system, x):
    if np.shape(ad.value_of(x))[-1:] != (system.n,):
        raise StructuralError(f"{system.name}: state must have last dimension {system.n}")


def eval_full(system, x, t=0.0, w=None):
    _check_dim(system, x)
    return system.full(x, t, w)


def eval_prior(system, x, t=0.0, w=None):
    _check_dim(system, x)
    return system.prior(x, t, w)


def eval_residual_target(system, x, t=0.0, w=None):
    _check_dim(system, x)
    return system.residual(x, t, w)


def eval_constraint(system, x, t=0.0):
    _check_dim(system, x)
    return ad.sub(system.g_raw(x, t), system.offset)


def eval_constraint_jacobian(system, x, t=0.0, check_rank=True):
    x = np.asarray(ad.value_of(x), dtype=np.float64)
    _check_dim(system, x)
    G = np.asarray(system.jac(x, t), dtype=np.float64)
    if check_rank:
        smin = np.linalg.svd(G, compute_uv=False).min()
        if smin < RANK_TOL:
            raise ConstraintQualificationError(
                f"{system.name}: constraint Jacobian rank deficient (sigma_min={smin:.3e})"
            )
    return G


def eval_constraint_hessian(system, x, t=0.0):
    """Stack of constraint Hessians, shape ``(m, n, n)``."""
    x = np.asarray(ad.value_of(x), dtype=np.float64)
    return np.asarray(system.hess(x, t), dtype=np.float64)


def constraint_fns(system, t):
    """Numeric ``(g, G, hess)`` closures at a fixed time, for projection."""
    t = float(t)

    def g(x):
        return np.asarray(system.g_raw(x, t), dtype=np.float64) - system.offset

    def G(x):
        return np.asarray(system.jac(x, t), dtype=np.float64)

    def H(x):
        return np.asarray(system.hess(x, t), dtype=np.float64)

    return g, G, H


# --- Lotka-Volterra ---------------------------------------------------------

LV_PARAMS = {"alpha": 1.5, "beta": 1.0, "gamma": 3.0, "delta": 1.0}
LV_GUARD = 1e-8


def lotka_volterra(x0=(1.0, 1.0)):
    p = dict(LV_PARAMS)
    al, be, ga, de = p["alpha"], p["beta"], p["gamma"], p["delta"]

    def full(s, t, w):
        x, y = _col(s, 0), _col(s, 1)
        xy = ad.mul(x, y)
        return ad.stack([ad.sub(ad.mul(al, x), ad.mul(be, xy)),
                         ad.sub(ad.mul(de, xy), ad.mul(ga, y))])

    def prior(s, t, w):
        return ad.stack([ad.mul(al, _col(s, 0)), ad.mul(-ga, _col(s, 1))])

    def residual(s, t, w):
        xy = ad.mul(_col(s, 0), _col(s, 1))
        return ad.stack([ad.mul(-be, xy), ad.mul(de, xy)])

    def _guard(s):
        v = np.asarray(ad.value_of(s))
        if np.any(v[..., :2] < LV_GUARD):
            raise DomainError("lotka_volterra: invariant needs x, y >= 1e-8 (log)")

    def g_raw(s, t):
        _guard(s)
        x, y = _col(s, 0), _col(s, 1)
        V = ad.add(ad.sub(ad.mul(de, x), ad.mul(ga, ad.log(x))),
                   ad.sub(ad.mul(be, y), ad.mul(al, ad.log(y))))
        return ad.stack([V])

    def jac(s, t):
        _guard(s)
        x, y = _cols(s)
        return _mat([[de - ga / x, be - al / y]], s)

    def hess(s, t):
        x, y = _cols(s)
        return _mat([[ga / x**2, 0.0], [0.0, al / y**2]], s)[..., None, :, :]

    return SystemSpec("lotka_volterra", 2, 0, 1, p, full, prior, residual, g_raw, jac, hess,
                      np.array(x0, dtype=np.float64)).with_initial_state(x0)


# --- mass-spring --------------------------------------------------------------

def mass_spring(x0=(1.0, 0.0)):
    def full(s, t, w):
        return ad.stack([_col(s, 1), ad.neg(_col(s, 0))])

    def prior(s, t, w):
        return ad.stack([_col(s, 1), 0.0])

    def residual(s, t, w):
        return ad.stack([0.0, ad.neg(_col(s, 0))])

    def g_raw(s, t):
        return ad.stack([ad.mul(0.5, ad.add(ad.square(_col(s, 0)), ad.square(_col(s, 1))))])

    def jac(s, t):
        return np.asarray(s, dtype=np.float64)[..., None, :].copy()

    def hess(s, t):
        return _const_hess(np.eye(2)[None], s)

    return SystemSpec("mass_spring", 2, 0, 1, {}, full, prior, residual, g_raw, jac, hess,
                      np.array(x0, dtype=np.float64)).with_initial_state(x0)


# --- two-body -----------------------------------------------------------------

TWO_BODY_ECC = 0.6
TWO_BODY_X0 = (1.0 - TWO_BODY_ECC, 0.0, 0.0, float(np.sqrt((1 + TWO_BODY_ECC) / (1 - TWO_BODY_ECC))))
SINGULAR_RADIUS = 1e-9


def _inv_r3(q1, q2):
    r2 = ad.add(ad.square(q1), ad.square(q2))
    if np.any(np.sqrt(np.asarray(ad.value_of(r2))) < SINGULAR_RADIUS):
        raise SingularityError("two_body: |q| < 1e-9")
    r = ad.sqrt(r2)
    return ad.reciprocal(ad.mul(r2, r))


def two_body(x0=TWO_BODY_X0):
    def full(s, t, w):
        q1, q2 = _col(s, 0), _col(s, 1)
        k = _inv_r3(q1, q2)
        return ad.stack([_col(s, 2), _col(s, 3), ad.neg(ad.mul(q1, k)), ad.neg(ad.mul(q2, k))])

    def prior(s, t, w):
        return ad.stack([_col(s, 2), _col(s, 3), 0.0, 0.0])

    def residual(s, t, w):
        q1, q2 = _col(s, 0), _col(s, 1)
        k = _inv_r3(q1, q2)
        return ad.stack([0.0, 0.0, ad.neg(ad.mul(q1, k)), ad.neg(ad.mul(q2, k))])

    def g_raw(s, t):
        L = ad.sub(ad.mul(_col(s, 0), _col(s, 3)), ad.mul(_col(s, 1), _col(s, 2)))
        return ad.stack([L])

    def jac(s, t):
        q1, q2, p1, p2 = _cols(s)
        return _mat([[p2, -p1, -q2, q1]], s)

    def hess(s, t):
        H = np.zeros((1, 4, 4))
        H[0, 0, 3] = H[0, 3, 0] = 1.0
        H[0, 1, 2] = H[0, 2, 1] = -1.0
        return _const_hess(H, s)

    return SystemSpec("two_body", 4, 0, 1, {"eccentricity": TWO_BODY_ECC}, full, prior, residual,
                      g_raw, jac, hess, np.array(x0, dtype=np.float64)).with_initial_state(x0)


# --- nonlinear spring ---------------------------------------------------------

def nonlinear_spring(x0=(1.0, 0.0, 0.0, 0.5)):
    # (1,0,0,1) is a circular orbit: grad E and grad L coincide there
    def _force(s):
        x, y = _col(s, 0), _col(s, 1)
        r2 = ad.add(ad.square(x), ad.square(y))
        return ad.neg(ad.mul(x, r2)), ad.neg(ad.mul(y, r2))

    def full(s, t, w):
        fu, fv = _force(s)
        return ad.stack([_col(s, 2), _col(s, 3), fu, fv])

    def prior(s, t, w):
        return ad.stack([_col(s, 2), _col(s, 3), 0.0, 0.0])

    def residual(s, t, w):
        fu, fv = _force(s)
        return ad.stack([0.0, 0.0, fu, fv])

    def g_raw(s, t):
        x, y, u, v = (_col(s, i) for i in range(4))
        r2 = ad.add(ad.square(x), ad.square(y))
        E = ad.add(ad.mul(0.5, ad.add(ad.square(u), ad.square(v))), ad.mul(0.25, ad.square(r2)))
        L = ad.sub(ad.mul(x, v), ad.mul(y, u))
        return ad.stack([E, L])

    def jac(s, t):
        x, y, u, v = _cols(s)
        r2 = x * x + y * y
        return _mat([[x * r2, y * r2, u, v], [v, -u, -y, x]], s)

    def hess(s, t):
        x, y, u, v = _cols(s)
        r2 = x * x + y * y
        H = np.zeros(np.shape(s)[:-1] + (2, 4, 4))
        H[..., 0, 0, 0] = r2 + 2 * x * x
        H[..., 0, 1, 1] = r2 + 2 * y * y
        H[..., 0, 0, 1] = H[..., 0, 1, 0] = 2 * x * y
        H[..., 0, 2, 2] = H[..., 0, 3, 3] = 1.0
        H[..., 1, 0, 3] = H[..., 1, 3, 0] = 1.0
        H[..., 1, 1, 2] = H[..., 1, 2, 1] = -1.0
        return H

    return SystemSpec("nonlinear_spring", 4, 0, 2, {}, full, prior, residual, g_raw, jac, hess,
                      np.array(x0, dtype=np.float64)).with_initial_state(x0)


# --- planar robot arm ---------------------------------------------------------

ARM_CENTER = (1.5, 0.5)
ARM_RADIUS = 0.5
ARM_GUESS = (0.0, 1.0, -1.5)


def arm_path(t):
    t = np.asarray(t, dtype=np.float64)
    return np.stack([ARM_CENTER[0] + ARM_RADIUS * np.cos(t),
                     ARM_CENTER[1] + ARM_RADIUS * np.sin(t)], axis=-1)


def arm_path_velocity(t):
    t = np.asarray(t, dtype=np.float64)
    return np.stack([-ARM_RADIUS * np.sin(t), ARM_RADIUS * np.cos(t)], axis=-1)


def _arm_angles(s):
    a1 = _col(s, 0)
    a2 = ad.add(a1, _col(s, 1))
    a3 = ad.add(a2, _col(s, 2))
    return a1, a2, a3


_MAXJK = np.maximum.outer(np.arange(3), np.arange(3))


def _arm_tail_sums(theta):
    a = np.cumsum(theta, axis=-1)
    sn, cs = np.sin(a), np.cos(a)
    rs = np.flip(np.cumsum(np.flip(sn, -1), -1), -1)
    rc = np.flip(np.cumsum(np.flip(cs, -1), -1), -1)
    return rs, rc


def _arm_gram(rs, rc):
    a = np.sum(rs * rs, -1)
    b = -np.sum(rs * rc, -1)
    c = np.sum(rc * rc, -1)
    lam_min = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return a, b, c, lam_min


def _arm_fwd(theta, w):
    """Joint velocities e'^T (e' e'^T)^{-1} w, batched over leading axes.

    Singular configurations give NaN rows here; the Python-level field raises.
    """
    theta = np.asarray(theta, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    rs, rc = _arm_tail_sums(theta)
    a, b, c, lam_min = _arm_gram(rs, rc)
    det = np.where(lam_min < RANK_TOL, np.nan, a * c - b * b)
    w1, w2 = w[..., 0], w[..., 1]
    u1 = (c * w1 - b * w2) / det
    u2 = (a * w2 - b * w1) / det
    f = -rs * u1[..., None] + rc * u2[..., None]
    return f, (rs, rc, a, b, c, det, u1, u2)


def _arm_vjp(gbar, f, args, attrs, saved):
    rs, rc, a, b, c, det, u1, u2 = saved
    # v = A^{-1} e' gbar
    p1 = np.sum(-rs * gbar, -1)
    p2 = np.sum(rc * gbar, -1)
    v1 = (c * p1 - b * p2) / det
    v2 = (a * p2 - b * p1) / det
    q = -rs * v1[..., None] + rc * v2[..., None]
    r = gbar - q
    # d e'[row, j] / d theta_k = -(tail cos | tail sin)[max(j, k)]
    M0 = u1[..., None] * r - v1[..., None] * f
    M1 = u2[..., None] * r - v2[..., None] * f
    g_theta = -(np.einsum("...j,...jk->...k", M0, rc[..., _MAXJK])
                + np.einsum("...j,...jk->...k", M1, rs[..., _MAXJK]))
    g_w = np.stack([v1, v2], axis=-1)
    theta, w = args
    return g_theta.reshape(np.shape(theta)), _unbroadcast_to(g_w, np.shape(w))


def _unbroadcast_to(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


P_ARM = ad.Primitive("arm_velocity", _arm_fwd, _arm_vjp, saves=True)


def robot_arm(x0=None):
    def full(s, t, w):
        if w is None:
            w = arm_path_velocity(t)
        lam_min = _arm_gram(*_arm_tail_sums(np.asarray(ad.value_of(s))))[3]
        if np.any(lam_min < RANK_TOL):
            raise SingularityError("robot_arm: e' e'^T is singular")
        return P_ARM(s, w)

    def residual(s, t, w):
        return _zeros_like(s)

    def g_raw(s, t):
        a = _arm_angles(s)
        ex = ad.add(ad.add(ad.cos(a[0]), ad.cos(a[1])), ad.cos(a[2]))
        ey = ad.add(ad.add(ad.sin(a[0]), ad.sin(a[1])), ad.sin(a[2]))
        p = arm_path(t)
        return ad.stack([ad.sub(ex, p[..., 0]), ad.sub(ey, p[..., 1])])

    def jac(s, t):
        rs, rc = _arm_tail_sums(np.asarray(s, dtype=np.float64))
        return np.stack([-rs, rc], axis=-2)

    def hess(s, t):
        rs, rc = _arm_tail_sums(np.asarray(s, dtype=np.float64))
        return np.stack([-rc[..., _MAXJK], -rs[..., _MAXJK]], axis=-3)

    spec = SystemSpec("robot_arm", 3, 2, 2, {"links": 3, "link_length": 1.0,
                                            "center": ARM_CENTER, "radius": ARM_RADIUS},
                      full, full, residual, g_raw, jac, hess, np.zeros(3),
                      offset=np.zeros(2), input_fn=arm_path_velocity, fixed_offset=True)
    if x0 is None:
        x0 = _arm_initial_angles(spec)
    return spec.with_initial_state(x0)


def _arm_initial_angles(spec):
    from .projection import project_robust

    g, G, H = constraint_fns(spec, 0.0)
    res = project_robust(g, G, np.array(ARM_GUESS), tol=1e-14, max_iter=100, hess=H)
    return res.x_star


# --- rigid body ---------------------------------------------------------------

RIGID_INERTIA = (1.0, 2.0, 3.0)


def rigid_body(x0=None):
    inv_I = 1.0 / np.array(RIGID_INERTIA)
    if x0 is None:
        x0 = (np.cos(0.1), 0.0, np.sin(0.1))

    def full(s, t, w):
        return ad.cross(s, ad.mul(s, inv_I))

    def prior(s, t, w):
        return _zeros_like(s)

    def g_raw(s, t):
        return ad.stack([ad.mul(0.5, ad.sum(ad.square(s), axis=-1))])

    def jac(s, t):
        return np.asarray(s, dtype=np.float64)[..., None, :].copy()

    def hess(s, t):
        return _const_hess(np.eye(3)[None], s)

    return SystemSpec("rigid_body", 3, 0, 1, {"inertia": RIGID_INERTIA}, full, prior, full,
                      g_raw, jac, hess, np.array(x0, dtype=np.float64)).with_initial_state(x0)


SYSTEMS = {
    "lotka_volterra": lotka_volterra,
    "mass_spring": mass_spring,
    "two_body": two_body,
    "nonlinear_spring": nonlinear_spring,
    "robot_arm": robot_arm,
    "rigid_body": rigid_body,
}


def make_system(name, x0=None):
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise StructuralError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return factory() if x0 is None else factory(x0)


# --- trajectories -------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        if self.inputs is not None:
            self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.validate()

    def validate(self):
        K1 = self.times.shape[0]
        if self.times.ndim != 1 or self.states.shape[0] != K1:
            raise StructuralError("times and states disagree on length")
        if self.inputs is not None and self.inputs.shape[0] != K1:
            raise StructuralError("inputs do not cover the time grid")
        if K1 > 1:
            dts = np.diff(self.times)
            if np.any(dts <= 0) or np.ptp(dts) > 1e-9 * max(1.0, abs(self.times[-1])):
                raise StructuralError("time grid must be strictly increasing and uniform")
        for arr in (self.times, self.states, self.inputs):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise StructuralError("trajectory contains non-finite entries")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def K(self):
        return len(self.times) - 1

    def window(self, start, stop):
        return Trajectory(self.times[start:stop], self.states[start:stop],
                          None if self.inputs is None else self.inputs[start:stop])

    def to_csv(self, path):
        n = self.states.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)]
        cols = [self.times[:, None], self.states]
        if self.inputs is not None:
            header += [f"w{i}" for i in range(self.inputs.shape[1])]
            cols.append(self.inputs)
        data = np.hstack(cols)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in data:
                w.writerow(["%.17g" % v for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))
        if header[0] != "t":
            raise StructuralError("trajectory CSV must start with a 't' column")
        xs = [i for i, h in enumerate(header) if h.startswith("x")]
        ws = [i for i, h in enumerate(header) if h.startswith("w")]
        return cls(body[:, 0], body[:, xs], body[:, ws] if ws else None)
