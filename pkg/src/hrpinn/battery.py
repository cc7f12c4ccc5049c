"""Lithium-ion discharge model as a semi-explicit index-1 DAE.

Differential state (charges in coulomb, filtered voltages in volt)::

    x = [q_bp, q_sp, q_bn, q_sn, Vo', Veta_p', Veta_n']

Given ``x`` and the applied current, every algebraic variable follows from an
explicit cascade (concentrations, mole fractions, kinetics, potentials), so no
nonlinear solve is needed.  The non-ideal intercalation voltage ``V_INT`` of
each electrode is a Redlich-Kister sum in the reference model; the hybrid
model swaps both sums for small MLPs on the electrode mole fraction.

All functions accept batched states ``(..., 7)`` and work on tape tensors, so
the same cascade serves data generation and training.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DomainError, StructuralError
from .integrate import get_integrator

STATE_NAMES = ("q_bp", "q_sp", "q_bn", "q_sn", "Vo_f", "Veta_p_f", "Veta_n_f")

RK_COEFFS_P = (-33642.23, 0.11, 23506.89, -74679.26, 14359.34, 307849.79, 85053.13,
               -1075148.06, 2173.62, 991586.68, 283423.47, -163020.34, -470297.35)
RK_COEFFS_N = (86.19,)


@dataclass(frozen=True)
class BatteryParams:
    q_max: float = 1.32e4
    R: float = 8.314
    F: float = 96487.0
    n: float = 1.0
    D: float = 7.0e6
    tau_o: float = 10.0
    alpha: float = 0.5
    R_o: float = 0.085
    S_p: float = 2e-4
    S_n: float = 2e-4
    k_p: float = 2e4
    k_n: float = 2e4
    v_sp: float = 2e-6
    v_sn: float = 2e-6
    v_bp: float = 2e-5
    v_bn: float = 2e-5
    tau_eta_p: float = 90.0
    tau_eta_n: float = 90.0
    U0_p: float = 4.03
    U0_n: float = 0.01
    A_p: tuple = RK_COEFFS_P
    A_n: tuple = RK_COEFFS_N
    T: float = 298.0
    # numerical guards
    eps_rk: float = 1e-6
    eps_x: float = 1e-6
    # initial state of charge
    x_p0: float = 0.4
    x_n0: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "A_p", tuple(float(a) for a in self.A_p))
        object.__setattr__(self, "A_n", tuple(float(a) for a in self.A_n))
        bad = [f.name for f in dataclasses.fields(self)
               if f.name not in ("A_p", "A_n") and not getattr(self, f.name) > 0]
        if bad:
            raise ConfigError([f"{name} must be positive" for name in bad])
        for name in ("x_p0", "x_n0"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError([f"{name} must lie in (0, 1)"])

    @property
    def q_max_sp(self):
        return self.q_max * self.v_sp / (self.v_sp + self.v_bp)

    @property
    def q_max_sn(self):
        return self.q_max * self.v_sn / (self.v_sn + self.v_bn)

    def initial_state(self):
        """Charges split between bulk and surface by volume; filters at rest."""
        qp, qn = self.x_p0 * self.q_max, self.x_n0 * self.q_max
        sp = self.v_sp / (self.v_sp + self.v_bp)
        sn = self.v_sn / (self.v_sn + self.v_bn)
        return np.array([qp * (1 - sp), qp * sp, qn * (1 - sn), qn * sn, 0.0, 0.0, 0.0])

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["A_p"], d["A_n"] = list(self.A_p), list(self.A_n)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError([f"unknown battery parameter {k!r}" for k in extra])
        return cls(**d)


# --- Redlich-Kister -------------------------------------------------------------

def redlich_kister(x, coeffs, n=1.0, F=96487.0, eps_rk=1e-6, flags=None):
    """Intercalation voltage ``(1/nF) sum_k A_k [u^(k+1) - (k u - (x-1)) u^(k-1)]``.

    ``u = 2x - 1``.  The k = 0 term divides by ``u``; where ``|u| < eps_rk``
    that divisor is clamped to ``eps_rk`` with its sign kept (zero counts as
    positive) and, if ``flags`` is a list, a note is appended to it.
    """
    u = ad.sub(ad.mul(2.0, x), 1.0)
    uv = np.asarray(ad.value_of(u), dtype=np.float64)
    small = np.abs(uv) < eps_rk
    if small.any():
        if flags is not None:
            flags.append(f"redlich_kister clamp at x={np.asarray(ad.value_of(x))[small].ravel()[:3]}")
        u_div = np.where(small, np.where(uv < 0, -eps_rk, eps_rk), uv)
        # keep the dependence on x where the divisor is untouched
        u_div = ad.add(ad.mul(u, (~small).astype(np.float64)), np.where(small, u_div, 0.0))
    else:
        u_div = u
    xm1 = ad.sub(x, 1.0)
    total = 0.0
    pw = 1.0  # u^(k-1) for k >= 1
    for k, A in enumerate(coeffs):
        if k == 0:
            term = ad.add(u, ad.div(xm1, u_div))
        else:
            term = ad.sub(ad.mul(ad.mul(pw, u), u), ad.mul(ad.sub(ad.mul(float(k), u), xm1), pw))
            pw = ad.mul(pw, u)
        total = ad.add(total, ad.mul(A, term))
    return ad.mul(1.0 / (n * F), total)


def redlich_kister_terms(x, coeffs, n=1.0, F=96487.0):
    """Plain term-by-term evaluation for scalars, used to cross-check the sum."""
    x = float(x)
    u = 2.0 * x - 1.0
    s = 0.0
    for k, A in enumerate(coeffs):
        s += A * (u ** (k + 1) - (k * u - (x - 1.0)) * u ** (k - 1))
    return s / (n * F)


# --- algebraic cascade --------------------------------------------------------

@dataclass
class AlgebraicState:
    V: object
    V_U_p: object
    V_U_n: object
    V_INT_p: object
    V_INT_n: object
    V_eta_p: object
    V_eta_n: object
    J_p: object
    J_n: object
    J0_p: object
    J0_n: object
    V_o: object
    qbs_p: object
    qbs_n: object
    C_bp: object
    C_sp: object
    C_bn: object
    C_sn: object
    x_p: object
    x_n: object
    x_sp: object
    x_sn: object
    flags: list = field(default_factory=list)

    def numeric(self):
        vals = {f.name: np.asarray(ad.value_of(getattr(self, f.name)), dtype=np.float64)
                for f in dataclasses.fields(self) if f.name != "flags"}
        return AlgebraicState(**vals, flags=list(self.flags))


def _col(x, i):
    return ad.index(x, (Ellipsis, i))


def _check_fraction(name, v, eps):
    v = np.asarray(ad.value_of(v))
    if not np.all((v > eps) & (v < 1.0 - eps)):
        bad = v[~((v > eps) & (v < 1.0 - eps))].ravel()[0]
        raise DomainError(f"mole fraction {name}={bad:.6g} outside ({eps:g}, {1 - eps:g})")


def rk_vint(params):
    """The reference ``V_INT`` pair as callables of the mole fraction."""
    def vp(x, flags=None):
        return redlich_kister(x, params.A_p, params.n, params.F, params.eps_rk, flags)

    def vn(x, flags=None):
        return redlich_kister(x, params.A_n, params.n, params.F, params.eps_rk, flags)

    return vp, vn


def solve_algebraic(x, i_app, params, vint=None, check_domain=True):
    """Explicit cascade for every algebraic variable at state ``x``.

    ``vint`` is a pair of callables ``(V_INT_p(x_p), V_INT_n(x_n))``;
    the Redlich-Kister sums are used when it is omitted.
    """
    p = params
    if np.shape(ad.value_of(x))[-1:] != (7,):
        raise StructuralError("battery state must have last dimension 7")
    flags = []
    q_bp, q_sp, q_bn, q_sn = (_col(x, i) for i in range(4))
    vo_f, vep_f, ven_f = (_col(x, i) for i in range(4, 7))
    C_bp, C_sp = ad.mul(q_bp, 1.0 / p.v_bp), ad.mul(q_sp, 1.0 / p.v_sp)
    C_bn, C_sn = ad.mul(q_bn, 1.0 / p.v_bn), ad.mul(q_sn, 1.0 / p.v_sn)
    x_p = ad.mul(ad.add(q_bp, q_sp), 1.0 / p.q_max)
    x_n = ad.mul(ad.add(q_bn, q_sn), 1.0 / p.q_max)
    x_sp = ad.mul(q_sp, 1.0 / p.q_max_sp)
    x_sn = ad.mul(q_sn, 1.0 / p.q_max_sn)
    if check_domain:
        for name, v in (("x_p", x_p), ("x_n", x_n), ("x_sp", x_sp), ("x_sn", x_sn)):
            _check_fraction(name, v, p.eps_x)
    J_p = ad.mul(i_app, 1.0 / p.S_p)
    J_n = ad.mul(i_app, 1.0 / p.S_n)

    def j0(k, xs):
        return ad.mul(k, ad.exp(ad.add(ad.mul(p.alpha, ad.log(ad.sub(1.0, xs))),
                                       ad.mul(1.0 - p.alpha, ad.log(xs)))))

    J0_p, J0_n = j0(p.k_p, x_sp), j0(p.k_n, x_sn)
    eta = 2.0 * p.R * p.T / p.F
    V_eta_p = ad.mul(eta, ad.arcsinh(ad.div(J_p, ad.mul(2.0, J0_p))))
    V_eta_n = ad.mul(eta, ad.arcsinh(ad.div(J_n, ad.mul(2.0, J0_n))))
    if vint is None:
        rp, rn = rk_vint(p)
        V_INT_p, V_INT_n = rp(x_p, flags), rn(x_n, flags)
    else:
        V_INT_p, V_INT_n = vint[0](x_p), vint[1](x_n)
    nernst = p.R * p.T / (p.n * p.F)

    def vu(U0, xi, vi):
        return ad.add(ad.add(U0, ad.mul(nernst, ad.log(ad.div(ad.sub(1.0, xi), xi)))), vi)

    V_U_p, V_U_n = vu(p.U0_p, x_p, V_INT_p), vu(p.U0_n, x_n, V_INT_n)
    V_o = ad.mul(i_app, p.R_o)
    qbs_p = ad.mul(ad.sub(C_bp, C_sp), 1.0 / p.D)
    qbs_n = ad.mul(ad.sub(C_bn, C_sn), 1.0 / p.D)
    V = ad.sub(ad.sub(V_U_p, V_U_n), ad.add(ad.add(vo_f, vep_f), ven_f))
    return AlgebraicState(V, V_U_p, V_U_n, V_INT_p, V_INT_n, V_eta_p, V_eta_n, J_p, J_n,
                          J0_p, J0_n, V_o, qbs_p, qbs_n, C_bp, C_sp, C_bn, C_sn,
                          x_p, x_n, x_sp, x_sn, flags)


def battery_derivative(x, z, i_app, params):
    """The seven state rates given the solved algebraic variables."""
    p = params
    d_sp = ad.add(i_app, z.qbs_p)
    d_bp = ad.neg(z.qbs_p)
    d_sn = ad.add(ad.neg(i_app), z.qbs_n)
    d_bn = ad.neg(z.qbs_n)
    d_vo = ad.mul(ad.sub(z.V_o, _col(x, 4)), 1.0 / p.tau_o)
    d_vp = ad.mul(ad.sub(z.V_eta_p, _col(x, 5)), 1.0 / p.tau_eta_p)
    d_vn = ad.mul(ad.sub(z.V_eta_n, _col(x, 6)), 1.0 / p.tau_eta_n)
    return ad.stack([d_bp, d_sp, d_bn, d_sn, d_vo, d_vp, d_vn], axis=-1)


def algebraic_residuals(x, i_app, z, params, check_vint=True):
    """Every algebraic constraint re-evaluated from ``z``, as relative residuals.

    Each residual ``lhs - rhs`` is divided by ``max(1, |lhs|, |rhs|)``: the
    concentrations are ~1e8 mol/m^3, so absolute residuals there sit at
    rounding level times that scale.  The Redlich-Kister line is checked
    against the scalar term-by-term evaluator.
    """
    p = params
    x = np.asarray(x, dtype=np.float64)
    i_app = float(i_app)
    z = z.numeric()
    q_bp, q_sp, q_bn, q_sn, vo_f, vep_f, ven_f = (float(v) for v in x)

    def rel(lhs, rhs):
        lhs, rhs = float(lhs), float(rhs)
        return abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs))

    kT = p.R * p.T
    out = {
        "V": rel(z.V, z.V_U_p - z.V_U_n - vo_f - vep_f - ven_f),
        "V_U_p": rel(z.V_U_p, p.U0_p + kT / (p.n * p.F) * np.log((1 - z.x_p) / z.x_p) + z.V_INT_p),
        "V_U_n": rel(z.V_U_n, p.U0_n + kT / (p.n * p.F) * np.log((1 - z.x_n) / z.x_n) + z.V_INT_n),
        "V_eta_p": rel(z.V_eta_p, 2 * kT / p.F * np.arcsinh(z.J_p / (2 * z.J0_p))),
        "V_eta_n": rel(z.V_eta_n, 2 * kT / p.F * np.arcsinh(z.J_n / (2 * z.J0_n))),
        "J_p": rel(z.J_p, i_app / p.S_p),
        "J_n": rel(z.J_n, i_app / p.S_n),
        "J0_p": rel(z.J0_p, p.k_p * (1 - z.x_sp) ** p.alpha * z.x_sp ** (1 - p.alpha)),
        "J0_n": rel(z.J0_n, p.k_n * (1 - z.x_sn) ** p.alpha * z.x_sn ** (1 - p.alpha)),
        "V_o": rel(z.V_o, i_app * p.R_o),
        "qbs_p": rel(z.qbs_p, (z.C_bp - z.C_sp) / p.D),
        "qbs_n": rel(z.qbs_n, (z.C_bn - z.C_sn) / p.D),
        "C_bp": rel(z.C_bp, q_bp / p.v_bp),
        "C_sp": rel(z.C_sp, q_sp / p.v_sp),
        "C_bn": rel(z.C_bn, q_bn / p.v_bn),
        "C_sn": rel(z.C_sn, q_sn / p.v_sn),
        "x_p": rel(z.x_p, (q_bp + q_sp) / p.q_max),
        "x_n": rel(z.x_n, (q_bn + q_sn) / p.q_max),
        "x_sp": rel(z.x_sp, q_sp / p.q_max_sp),
        "x_sn": rel(z.x_sn, q_sn / p.q_max_sn),
    }
    if check_vint:
        out["V_INT_p"] = rel(z.V_INT_p, redlich_kister_terms(z.x_p, p.A_p, p.n, p.F))
        out["V_INT_n"] = rel(z.V_INT_n, redlich_kister_terms(z.x_n, p.A_n, p.n, p.F))
    return out


def total_lithium(states):
    s = np.asarray(states, dtype=np.float64)
    return s[..., 0] + s[..., 1] + s[..., 2] + s[..., 3]


# --- discharge generation -------------------------------------------------------

def constant_profile(current, duration, dt=1.0):
    """ZOH current samples for a constant-current discharge of ``duration`` seconds."""
    K = int(round(duration / dt))
    return np.full(K + 1, float(current))


@dataclass
class Discharge:
    times: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    states: np.ndarray
    temperature: float
    stop_reason: str = "profile_end"
    flags: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.times) - 1

    def to_csv(self, path):
        """Observation series ``t,i_app,T,V``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "i_app", "T", "V"])
            for t, i, v in zip(self.times, self.current, self.voltage):
                w.writerow(["%.17g" % t, "%.17g" % i, "%.17g" % self.temperature, "%.17g" % v])

    def latent_to_csv(self, path):
        """Latent differential states, one row per observation time."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + list(STATE_NAMES))
            for t, s in zip(self.times, self.states):
                w.writerow(["%.17g" % t] + ["%.17g" % v for v in s])

    @classmethod
    def from_csv(cls, path, latent_path=None):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["t", "i_app", "T", "V"]:
            raise StructuralError(f"{path}: expected header t,i_app,T,V")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        states = np.full((len(data), 7), np.nan)
        if latent_path is not None:
            with open(latent_path, newline="", encoding="utf-8") as fh:
                lrows = list(csv.reader(fh))
            states = np.array([[float(v) for v in r[1:]] for r in lrows[1:]], dtype=np.float64)
        return cls(data[:, 0], data[:, 1], data[:, 3], states, float(data[0, 2]))


def _field(params, vint, i_now, flags=None, check_domain=True):
    def f(x, t):
        z = solve_algebraic(x, i_now, params, vint, check_domain=check_domain)
        if flags is not None:
            flags.extend(z.flags)
        return battery_derivative(x, z, i_now, params)
    return f


def generate_discharge(params, current_profile, dt=1.0, v_cutoff=2.7, x0=None,
                       integrator="rk4"):
    """Integrate the reference DAE under a ZOH current profile.

    Stops when the terminal voltage reaches ``v_cutoff`` (that sample is
    kept), when the profile ends, or when a mole fraction leaves its domain
    (truncated before the bad step, ``stop_reason="domain"``).
    """
    profile = np.asarray(current_profile, dtype=np.float64).ravel()
    if profile.size == 0:
        raise StructuralError("empty current profile")
    stepper = get_integrator(integrator)
    x = params.initial_state() if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    flags = []
    times, cur, volt, states = [], [], [], []
    reason = "profile_end"
    for k, i_now in enumerate(profile):
        try:
            z = solve_algebraic(x, i_now, params)
        except DomainError as exc:
            flags.append(f"step {k}: {exc}")
            reason = "domain"
            break
        flags.extend(f"step {k}: {m}" for m in z.flags)
        times.append(k * dt)
        cur.append(i_now)
        volt.append(float(z.V))
        states.append(x.copy())
        if z.V <= v_cutoff:
            reason = "cutoff"
            break
        if k == len(profile) - 1:
            break
        try:
            x = stepper(_field(params, None, i_now, flags), x, k * dt, dt, step=k)
        except DomainError as exc:
            flags.append(f"step {k}: {exc}")
            reason = "domain"
            break
        x = np.asarray(x, dtype=np.float64)
    return Discharge(np.array(times), np.array(cur), np.array(volt), np.array(states),
                     params.T, reason, flags)


# --- hybrid model ---------------------------------------------------------------

def mlp_vint(mlp, input_scale=1.0):
    """``V_INT`` from a (1, ..., 1) network on the centred mole fraction.

    The network sees ``input_scale * (x - 0.5)``.
    """
    if mlp.n_in != 1 or mlp.n_out != 1:
        raise StructuralError("V_INT networks map a scalar mole fraction to a scalar")

    def v(x):
        xin = ad.mul(input_scale, ad.sub(x, 0.5))
        out = nn.mlp_forward(mlp, ad.reshape(xin, np.shape(ad.value_of(x)) + (1,)))
        return ad.reshape(out, np.shape(ad.value_of(x)))

    return v


def zero_vint(x):
    return np.zeros(np.shape(ad.value_of(x)))


def battery_hrpinn_rollout(params_phys, mlp_p, mlp_n, x0, current_profile, dt=1.0,
                           integrator="euler", vint=None, input_scale=1.0):
    """Voltage predictions of the hybrid cell, one per profile sample.

    ``mlp_p`` / ``mlp_n`` replace the Redlich-Kister sums; pass ``vint``
    (a pair of callables) instead to substitute arbitrary functions, e.g. the
    true sums or zeros.  ``current_profile`` may be ``(K+1,)`` or, for several
    profiles at once, ``(P, K+1)`` with ``x0`` of shape ``(P, 7)``.
    Returns the stacked voltages (a tape tensor when the networks are
    bound to one) and the numeric states.
    """
    if vint is None:
        vint = (mlp_vint(mlp_p, input_scale), mlp_vint(mlp_n, input_scale))
    profile = np.asarray(current_profile, dtype=np.float64)
    steps = profile.shape[-1]
    stepper = get_integrator(integrator)
    x = np.asarray(x0, dtype=np.float64)
    if profile.ndim == 2 and x.ndim == 1:
        x = np.broadcast_to(x, (profile.shape[0], 7)).copy()
    volts, states = [], []
    for k in range(steps):
        i_now = profile[..., k]
        z = solve_algebraic(x, i_now, params_phys, vint)
        volts.append(z.V)
        states.append(np.asarray(ad.value_of(x)))
        if k < steps - 1:
            x = stepper(_field(params_phys, vint, i_now), x, k * dt, dt, step=k)
    return ad.stack(volts, axis=-1), np.stack(states, axis=-2)


@dataclass
class BatteryModelConfig:
    hidden: tuple = (11,)
    integrator: str = "euler"
    dt: float = 1.0
    input_scale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        p = []
        if not self.hidden or min(self.hidden) < 1:
            p.append("hidden widths must be >= 1")
        if self.integrator not in ("euler", "rk4"):
            p.append("integrator must be euler|rk4")
        if not self.dt > 0:
            p.append("dt must be positive")
        if p:
            raise ConfigError(p)


def init_battery_params(config, seed):
    sizes = (1,) + config.hidden + (1,)
    return {"p": nn.mlp_init(sizes, [int(seed), 0]), "n": nn.mlp_init(sizes, [int(seed), 1])}


def _stack_profiles(discharges):
    """Pad observation series to a common length; returns currents, voltages, mask."""
    K = max(d.K for d in discharges) + 1
    P = len(discharges)
    cur = np.zeros((P, K))
    volt = np.zeros((P, K))
    mask = np.zeros((P, K))
    for j, d in enumerate(discharges):
        n = d.K + 1
        cur[j, :n] = d.current
        cur[j, n:] = d.current[-1]  # keep drawing the last current past the cutoff
        volt[j, :n] = d.voltage
        mask[j, :n] = 1.0
    return cur, volt, mask


def battery_loss(params, phys, discharges, config, x0=None):
    """Masked voltage MSE over several discharges, trained on voltage only."""
    cur, volt, mask = _stack_profiles(discharges)
    x0 = phys.initial_state() if x0 is None else x0
    pred, _ = battery_hrpinn_rollout(phys, params["p"], params["n"], x0, cur,
                                     config.dt, config.integrator,
                                     input_scale=config.input_scale)
    err = ad.mul(ad.square(ad.sub(pred, volt)), mask)
    return ad.mul(1.0 / mask.sum(), ad.sum(err))


def predict_voltage(phys, discharge, config, params=None, vint=None, x0=None):
    """Numeric voltage prediction on one discharge's current samples."""
    x0 = phys.initial_state() if x0 is None else x0
    if params is not None and vint is None:
        vint = (mlp_vint(params["p"], config.input_scale),
                mlp_vint(params["n"], config.input_scale))
    v, _ = battery_hrpinn_rollout(phys, None, None, x0, discharge.current, config.dt,
                                  config.integrator, vint=vint)
    return np.asarray(ad.value_of(v), dtype=np.float64)
