"""Orthogonal projection onto ``{x : g(x) = 0}`` and its derivatives.

The closest feasible point ``x*`` to a prediction ``x~`` solves the KKT system

    x* - x~ + G(x*)^T lam = 0,      g(x*) = 0.

``project_robust`` runs damped Newton on that system; ``project_fast`` takes a
single Hessian-free linearized step.  Gradients come from implicit
differentiation: the exact version solves the transposed bordered system, the
fast version applies the tangent-space projector ``I - Q Q^T`` at ``x*``.

The single-state functions take callables on one state: ``g(x) -> (m,)``,
``G(x) -> (m, n)``, ``hess(x) -> (m, n, n)``.  The ``*_batch`` variants take
callables that map a stack ``(S, n)`` to ``(S, m)``, ``(S, m, n)`` and
``(S, m, n, n)``; they solve all members at once and report failures per
member instead of raising, which is what ensemble training needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (ConstraintQualificationError, DomainError, NonConvergenceError,
                     NonDegeneracyError)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50
MAX_HALVINGS = 20
RANK_TOL = 1e-10
FD_HESS_STEP = 1e-6

OK, NO_CONVERGENCE, RANK_DEFICIENT, NON_FINITE = 0, 1, 2, 3


@dataclass
class ProjectionResult:
    x_star: np.ndarray
    lam: np.ndarray
    iterations: int
    kkt_residual: float
    mode: str

    def trace_line(self, step):
        return f"{step},{self.mode},{self.iterations},{self.kkt_residual:.6e}"


@dataclass
class BatchProjection:
    x_star: np.ndarray      # (S, n); NaN rows where status != OK
    lam: np.ndarray         # (S, m)
    iterations: np.ndarray  # (S,)
    kkt_residual: np.ndarray
    status: np.ndarray
    mode: str

    def member(self, i):
        return ProjectionResult(self.x_star[i], self.lam[i], int(self.iterations[i]),
                                float(self.kkt_residual[i]), self.mode)


def fd_hessian(G, x, h=FD_HESS_STEP):
    """Central differences of the constraint Jacobian: ``H[..., i, :, j] = dG[i, :]/dx_j``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        cols.append((np.asarray(G(x + e)) - np.asarray(G(x - e))) / (2.0 * h))
    H = np.stack(cols, axis=-1)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def _bordered(Gx, lam, H):
    """``[[I + sum_i lam_i H_i, G^T], [G, 0]]`` for a stack of members."""
    S, m, n = Gx.shape
    K = np.zeros((S, n + m, n + m))
    K[:, :n, :n] = np.einsum("si,sijk->sjk", lam, H)
    K[:, np.arange(n), np.arange(n)] += 1.0
    K[:, :n, n:] = np.swapaxes(Gx, 1, 2)
    K[:, n:, :n] = Gx
    return K


def _residual(g, G, X, X_tilde, lam):
    Gx = np.asarray(G(X), dtype=np.float64)
    F = np.concatenate([X - X_tilde + np.einsum("si,sij->sj", lam, Gx),
                        np.asarray(g(X), dtype=np.float64)], axis=1)
    return F, Gx


def _sigma_min(Gx):
    return np.linalg.svd(Gx, compute_uv=False).min(axis=-1)


def _solve_members(A, b):
    """Batched ``A x = b``; members with a singular ``A`` come back as NaN."""
    try:
        return np.linalg.solve(A, b[..., None])[..., 0], np.zeros(len(A), dtype=bool)
    except np.linalg.LinAlgError:
        out = np.full(b.shape, np.nan)
        bad = np.zeros(len(A), dtype=bool)
        for i in range(len(A)):
            try:
                out[i] = np.linalg.solve(A[i], b[i])
            except np.linalg.LinAlgError:
                bad[i] = True
        return out, bad


def _rows(fn, X, tail=None):
    """``fn`` on a stack of states; rows outside its domain come back NaN.

    Without ``tail`` (the per-row output shape) a stack where every row is
    out of domain re-raises the :class:`DomainError`.
    """
    try:
        return np.asarray(fn(X), dtype=np.float64)
    except DomainError:
        if len(X) == 1 and tail is None:
            raise
        out = []
        for x in X:
            try:
                out.append(np.asarray(fn(x[None]), dtype=np.float64)[0])
            except DomainError:
                out.append(None)
        if tail is None:
            good = [o for o in out if o is not None]
            if not good:
                raise
            tail = good[0].shape
        return np.stack([np.full(tail, np.nan) if o is None else o for o in out])


def _guarded(g, G, hess, m, n):
    return (lambda X: _rows(g, X, (m,)), lambda X: _rows(G, X, (m, n)),
            lambda X: _rows(hess, X, (m, n, n)))


def _finite_rows(a):
    return np.isfinite(a.reshape(len(a), -1)).all(axis=1)


def project_robust_batch(g, G, X_tilde, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, hess=None):
    """Damped Newton on the KKT system for every member of ``X_tilde``.

    Newton starts from the linearized (fast) step.  ``iterations`` counts
    Newton solves and is at least one for every member that starts finite.
    """
    X_tilde = np.atleast_2d(np.asarray(X_tilde, dtype=np.float64))
    hess = hess if hess is not None else (lambda x: fd_hessian(G, x))
    S, n = X_tilde.shape
    status = np.full(S, OK)
    g0 = _rows(g, X_tilde)
    G0 = _rows(G, X_tilde)
    m = g0.shape[-1]
    g, G, hess = _guarded(g, G, hess, m, n)
    status[~(np.isfinite(X_tilde).all(1) & _finite_rows(g0) & _finite_rows(G0))] = NON_FINITE
    ok = status == OK
    smin = np.full(S, np.inf)
    if ok.any():
        smin[ok] = _sigma_min(G0[ok])
    status[ok & (smin < RANK_TOL)] = RANK_DEFICIENT
    ok = status == OK
    X = np.where(ok[:, None], X_tilde, 0.0)
    lam = np.zeros((S, m))
    G0s = np.where(ok[:, None, None], G0, 0.0)
    if ok.any():
        gram = G0s[ok] @ np.swapaxes(G0s[ok], 1, 2)
        lam0, _ = _solve_members(gram, g0[ok])
        lam[ok] = lam0
        X[ok] = X_tilde[ok] - np.einsum("si,sij->sj", lam0, G0s[ok])
    F = np.zeros((S, n + m))
    Gx = np.zeros((S, m, n))
    iters = np.zeros(S, dtype=int)
    restarted = np.zeros(S, dtype=bool)
    active = ok.copy()
    if active.any():
        F[active], Gx[active] = _residual(g, G, X[active], X_tilde[active], lam[active])
        # fall back to a cold start where the warm start left the domain
        cold = active & ~_finite_rows(F)
        if cold.any():
            X[cold], lam[cold] = X_tilde[cold], 0.0
            F[cold], Gx[cold] = _residual(g, G, X[cold], X_tilde[cold], lam[cold])
    while active.any():
        idx = np.flatnonzero(active)
        capped = idx[iters[idx] >= max_iter]
        if capped.size:
            status[capped] = NO_CONVERGENCE
            active[capped] = False
            idx = np.flatnonzero(active)
            if not idx.size:
                break
        Hx = np.asarray(hess(X[idx]), dtype=np.float64)
        K = _bordered(Gx[idx], lam[idx], Hx)
        step, singular = _solve_members(K, -F[idx])
        singular |= ~_finite_rows(step)
        if singular.any():
            status[idx[singular]] = RANK_DEFICIENT
            active[idx[singular]] = False
            idx, step = idx[~singular], step[~singular]
            if not idx.size:
                break
        iters[idx] += 1
        norm0 = np.linalg.norm(F[idx], axis=1)
        alpha = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        Xn, Ln = X[idx].copy(), lam[idx].copy()
        Fn, Gn = F[idx].copy(), Gx[idx].copy()
        for _ in range(MAX_HALVINGS + 1):
            p = np.flatnonzero(pending)
            xt = X[idx[p]] + alpha[p, None] * step[p, :n]
            lt = lam[idx[p]] + alpha[p, None] * step[p, n:]
            with np.errstate(all="ignore"):
                ft, gt = _residual(g, G, xt, X_tilde[idx[p]], lt)
            accept = _finite_rows(ft) & (np.linalg.norm(ft, axis=1) <= norm0[p])
            last = _ == MAX_HALVINGS
            take = accept | (last & _finite_rows(ft))
            Xn[p[take]], Ln[p[take]], Fn[p[take]], Gn[p[take]] = xt[take], lt[take], ft[take], gt[take]
            pending[p[accept]] = False
            alpha[p[~accept]] *= 0.5
            if not pending.any():
                break
        X[idx], lam[idx], F[idx], Gx[idx] = Xn, Ln, Fn, Gn
        done = np.abs(Fn).max(axis=1) <= tol
        active[idx[done]] = False
        # no halving reduced the KKT residual: Newton sits near a singular
        # point of the bordered system, so restart from a descent phase
        for i in idx[pending & ~done]:
            if restarted[i]:
                continue
            restarted[i] = True
            xr = _restore_descend(g, G, X[i], X_tilde[i], tol)
            if xr is None:
                continue
            Gr = np.asarray(G(xr[None]), dtype=np.float64)
            lr, _ = _solve_members(Gr @ np.swapaxes(Gr, 1, 2),
                                   np.einsum("sij,sj->si", Gr, X_tilde[i][None] - xr[None]))
            fr, gr = _residual(g, G, xr[None], X_tilde[i][None], lr)
            if _finite_rows(fr)[0]:
                X[i], lam[i], F[i], Gx[i] = xr, lr[0], fr[0], gr[0]
                if np.abs(fr[0]).max() <= tol:
                    active[i] = False
    resid = np.where(status == OK, np.abs(F).max(axis=1) if S else 0.0, np.nan)
    bad = status != OK
    X[bad] = np.nan
    lam[bad] = np.nan
    return BatchProjection(X, lam, iters, resid, status, "robust")


def _restore(g, G, x, tol, max_steps=50):
    """Gauss-Newton onto ``g = 0`` with minimum-norm steps; ``None`` if it fails."""
    for _ in range(max_steps):
        gx = np.asarray(g(x[None]), dtype=np.float64)[0]
        if not np.all(np.isfinite(gx)):
            return None
        if np.abs(gx).max() <= tol:
            return x
        Gx = np.asarray(G(x[None]), dtype=np.float64)[0]
        try:
            x = x - Gx.T @ np.linalg.solve(Gx @ Gx.T, gx)
        except np.linalg.LinAlgError:
            return None
    return None


def _restore_descend(g, G, x, x_tilde, tol, max_steps=200):
    """Projected-gradient descent of ``|x - x~|^2`` along the manifold.

    Each trial point is pulled back onto the manifold by :func:`_restore`.
    Slow but monotone; used only to get Newton out of a stall.
    """
    x = _restore(g, G, np.array(x, dtype=np.float64), tol)
    if x is None:
        x = _restore(g, G, np.array(x_tilde, dtype=np.float64), tol)
    if x is None:
        return None
    dist = np.sum((x - x_tilde) ** 2)
    for _ in range(max_steps):
        Gx = np.asarray(G(x[None]), dtype=np.float64)
        J, smin = _projector_batch(Gx)
        if smin[0] < RANK_TOL:
            return x
        d = J[0] @ (x - x_tilde)
        if np.linalg.norm(d) <= 1e-10 * (1.0 + np.sqrt(dist)):
            return x
        step = 1.0
        for _ in range(MAX_HALVINGS):
            xt = _restore(g, G, x - step * d, tol)
            if xt is not None:
                dt = np.sum((xt - x_tilde) ** 2)
                if dt < dist - 1e-4 * step * (d @ d):
                    x, dist = xt, dt
                    break
            step *= 0.5
        else:
            return x
    return x


def project_fast_batch(g, G, X_tilde):
    X_tilde = np.atleast_2d(np.asarray(X_tilde, dtype=np.float64))
    S, n = X_tilde.shape
    gx = _rows(g, X_tilde)
    Gx = _rows(G, X_tilde)
    m = gx.shape[-1]
    status = np.full(S, OK)
    status[~(np.isfinite(X_tilde).all(1) & _finite_rows(gx) & _finite_rows(Gx))] = NON_FINITE
    ok = status == OK
    X = np.full((S, n), np.nan)
    lam = np.full((S, m), np.nan)
    if ok.any():
        Q, R = np.linalg.qr(np.swapaxes(Gx[ok], 1, 2))
        smin = _sigma_min(R)
        good = smin >= RANK_TOL
        status[np.flatnonzero(ok)[~good]] = RANK_DEFICIENT
        if good.any():
            Q, R = Q[good], R[good]
            # G^T (G G^T)^{-1} g = Q R^{-T} g and lam = R^{-1} R^{-T} g
            z = np.linalg.solve(np.swapaxes(R, 1, 2), gx[ok][good][..., None])
            sel = np.flatnonzero(ok)[good]
            X[sel] = X_tilde[sel] - (Q @ z)[..., 0]
            lam[sel] = np.linalg.solve(R, z)[..., 0]
    resid = np.full(S, np.nan)
    ok = status == OK
    if ok.any():
        F, _ = _residual(g, G, X[ok], X_tilde[ok], lam[ok])
        resid[ok] = np.abs(F).max(axis=1)
    return BatchProjection(X, lam, np.ones(S, dtype=int), resid, status, "fast")


def _lift(fn):
    """Turn a single-state callable into a one-member batch callable."""
    if fn is None:
        return None
    return lambda X: np.asarray(fn(X[0]), dtype=np.float64)[None]


def _raise_for(status, res, mode):
    if status == OK:
        return
    if status == NO_CONVERGENCE:
        raise NonConvergenceError(
            f"{mode} projection did not converge in {res.iterations} iterations",
            residual=res.kkt_residual, iterations=res.iterations)
    if status == NON_FINITE:
        raise ConstraintQualificationError("constraint is not finite at the prediction")
    raise ConstraintQualificationError("constraint Jacobian / KKT matrix is rank deficient")


def project_robust(g, G, x_tilde, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, hess=None):
    """Robust projection of one state; raises on failure."""
    b = project_robust_batch(_lift(g), _lift(G), np.asarray(x_tilde, dtype=np.float64)[None],
                             tol=tol, max_iter=max_iter, hess=_lift(hess))
    res = b.member(0)
    if b.status[0] == NO_CONVERGENCE:
        res.iterations = max_iter
    _raise_for(b.status[0], res, "robust")
    return res


def project_fast(g, G, x_tilde):
    """One linearized projection step; exactly one linear solve."""
    b = project_fast_batch(_lift(g), _lift(G), np.asarray(x_tilde, dtype=np.float64)[None])
    _raise_for(b.status[0], b.member(0), "fast")
    return b.member(0)


def _projector_batch(Gx):
    Q, R = np.linalg.qr(np.swapaxes(Gx, -1, -2))
    smin = _sigma_min(R)
    n = Gx.shape[-1]
    return np.eye(n) - Q @ np.swapaxes(Q, -1, -2), smin


def tangent_projector(G_at_xstar):
    Gx = np.atleast_2d(np.asarray(G_at_xstar, dtype=np.float64))
    J, smin = _projector_batch(Gx[None])
    if smin[0] < RANK_TOL:
        raise ConstraintQualificationError(f"G has lost row rank (sigma_min={smin[0]:.3e})")
    return J[0]


def _exact_vjp_batch(X, lam, H, Gx, U):
    S, m, n = Gx.shape
    K = _bordered(Gx, lam, H)
    rhs = np.concatenate([U, np.zeros((S, m))], axis=1)
    sol, singular = _solve_members(np.swapaxes(K, 1, 2), rhs)
    # near-singular systems blow up rather than fail; treat them alike
    cond = np.linalg.cond(K)
    singular |= ~(cond < 1e14)
    sol[singular] = np.nan
    return sol[:, :n], singular


def projection_backward_exact(x_star, lam, hessians, G_at_xstar, upstream):
    Gx = np.atleast_2d(np.asarray(G_at_xstar, dtype=np.float64))
    out, singular = _exact_vjp_batch(
        np.asarray(x_star, dtype=np.float64)[None], np.atleast_1d(np.asarray(lam, dtype=np.float64))[None],
        np.asarray(hessians, dtype=np.float64)[None], Gx[None],
        np.asarray(upstream, dtype=np.float64)[None])
    if singular[0]:
        raise NonDegeneracyError("bordered KKT matrix is singular")
    return out[0]


def projection_backward_fast(G_at_xstar, upstream):
    return tangent_projector(G_at_xstar) @ np.asarray(upstream, dtype=np.float64)


# --- taped primitive ------------------------------------------------------------

def _proj_fwd(x_tilde, fns=None, mode="robust", backward="exact", tol=DEFAULT_TOL,
              max_iter=DEFAULT_MAX_ITER, step=None, trace=None):
    g, G, H = fns
    single = np.ndim(x_tilde) == 1
    X = np.atleast_2d(x_tilde)
    if mode == "fast":
        b = project_fast_batch(g, G, X)
    else:
        b = project_robust_batch(g, G, X, tol=tol, max_iter=max_iter, hess=H)
    if single:
        _raise_for(b.status[0], b.member(0), mode)
    if trace is not None:
        trace.extend(b.member(i).trace_line(step) for i in range(len(X)))
    return (b.x_star[0] if single else b.x_star), b


def _proj_vjp(gbar, out, args, attrs, saved):
    g, G, H = attrs["fns"]
    b = saved
    single = np.ndim(gbar) == 1
    U = np.atleast_2d(gbar)
    X = b.x_star
    ok = b.status == OK
    res = np.full(U.shape, np.nan)
    if ok.any():
        Gx = np.asarray(G(X[ok]), dtype=np.float64)
        if attrs.get("backward", "exact") == "fast" or attrs.get("mode") == "fast":
            J, _ = _projector_batch(Gx)
            res[ok] = np.einsum("sij,sj->si", J, U[ok])
        else:
            Hx = np.asarray(H(X[ok]) if H is not None else fd_hessian(G, X[ok]), dtype=np.float64)
            v, singular = _exact_vjp_batch(X[ok], b.lam[ok], Hx, Gx, U[ok])
            if single and singular[0]:
                raise NonDegeneracyError("bordered KKT matrix is singular")
            res[ok] = v
    return (res[0] if single else res,)


P_PROJECT = ad.Primitive("project", _proj_fwd, _proj_vjp, saves=True)


def project(x_tilde, fns, mode="robust", backward=None, tol=DEFAULT_TOL,
            max_iter=DEFAULT_MAX_ITER, step=None, trace=None):
    """Differentiable projection of a state ``(n,)`` or a member stack ``(S, n)``.

    ``fns`` is a ``(g, G, hess)`` triple of batch-capable callables (``hess`` may
    be ``None``).  A single state raises on failure; a stack yields NaN rows for
    members that fail.  Fast mode always differentiates with the tangent
    projector; robust mode defaults to the exact implicit gradient.
    """
    if mode not in ("fast", "robust"):
        raise ValueError(f"unknown projection mode {mode!r}")
    if backward is None:
        backward = "fast" if mode == "fast" else "exact"
    return P_PROJECT(x_tilde, fns=tuple(fns), mode=mode, backward=backward, tol=tol,
                     max_iter=max_iter, step=step, trace=trace)
