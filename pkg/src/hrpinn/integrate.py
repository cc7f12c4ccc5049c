"""Explicit one-step integrators and projected reference trajectories."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, HrpinnError
from .projection import project_robust
from .systems import Trajectory, constraint_fns


def _checked(x, step):
    if not ad.is_tensor(x) and not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite state at step {step}", where=step)
    return x


def step_euler(f, x, t, dt, step=None):
    return _checked(ad.add(x, ad.mul(dt, f(x, t))), step)


def step_rk4(f, x, t, dt, step=None):
    h = 0.5 * dt
    k1 = f(x, t)
    k2 = f(ad.add(x, ad.mul(h, k1)), t + h)
    k3 = f(ad.add(x, ad.mul(h, k2)), t + h)
    k4 = f(ad.add(x, ad.mul(dt, k3)), t + dt)
    incr = ad.add(ad.add(k1, ad.mul(2.0, k2)), ad.add(ad.mul(2.0, k3), k4))
    return _checked(ad.add(x, ad.mul(dt / 6.0, incr)), step)


INTEGRATORS = {"euler": step_euler, "rk4": step_rk4}
ORDER = {"euler": 1, "rk4": 4}


def get_integrator(name):
    try:
        return INTEGRATORS[name]
    except KeyError:
        raise ValueError(f"unknown integrator {name!r}; choose euler or rk4") from None


def system_map(system, field="full"):
    """``f(x, t)`` for one of the system's vector fields, inputs filled in from ``t``."""
    fn = getattr(system, field)

    def f(x, t):
        return fn(x, t, system.inputs_at(t))

    return f


def generate_reference(system, x0=None, dt=None, K=None, projected=True, tol=1e-12,
                       integrator="rk4", t0=None):
    """Integrate the true dynamics on a uniform grid, optionally projecting every step."""
    dt = system.dt if dt is None else float(dt)
    K = int(round(system.horizon / dt)) if K is None else int(K)
    if x0 is not None:
        system = system.with_initial_state(x0, t0)
    t0 = system.t0 if t0 is None else float(t0)
    stepper = get_integrator(integrator)
    f = system_map(system)
    times = t0 + dt * np.arange(K + 1)
    states = np.empty((K + 1, system.n))
    states[0] = system.x0
    x = system.x0.copy()
    for k in range(K):
        x = stepper(f, x, times[k], dt, step=k)
        if projected:
            g, G, H = constraint_fns(system, times[k + 1])
            try:
                x = project_robust(g, G, x, tol=tol, hess=H).x_star
            except HrpinnError as exc:
                raise type(exc)(f"reference projection failed at step {k + 1}: {exc}") from exc
        states[k + 1] = x
    inputs = None
    if system.input_fn is not None:
        inputs = np.asarray(system.input_fn(times), dtype=np.float64).reshape(K + 1, -1)
    return Trajectory(times, states, inputs)


def max_violation(system, traj):
    g = np.asarray(system.g_raw(traj.states, traj.times), dtype=np.float64) - system.offset
    return float(np.abs(g).max())
