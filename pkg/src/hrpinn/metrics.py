"""Evaluation metrics: MAE, DTW distance, constraint-violation statistics."""

from __future__ import annotations

import numpy as np

from .errors import StructuralError


def _series(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None]
    elif a.ndim > 2:
        raise StructuralError(f"series must be 1-D or (steps, dims), got shape {a.shape}")
    return a


def mae(pred, truth):
    """Mean absolute error; vector states average over dims, then steps."""
    p, t = _series(pred), _series(truth)
    if p.shape != t.shape:
        raise StructuralError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise StructuralError("empty series")
    return float(np.mean(np.abs(p - t)))


def dtw(pred, truth):
    """Unnormalized DTW with Euclidean local cost and no band.

    Steps are match, insertion and deletion.  The DP is swept one
    anti-diagonal at a time so each sweep is a vector operation.
    """
    a, b = _series(pred), _series(truth)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise StructuralError("dtw needs nonempty series")
    if a.shape[1] != b.shape[1]:
        raise StructuralError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        best = np.minimum(np.minimum(D[i - 1, j - 1], D[i - 1, j]), D[i, j - 1])
        D[i, j] = cost[i - 1, j - 1] + best
    return float(D[n, m])


def violation_stats(g_values):
    """``(mean, max)`` over steps of ``||g(h_k)||_inf``.

    ``g_values`` holds the calibrated constraint values per step, shape
    ``(K+1, m)`` (or ``(K+1,)`` for a single constraint).
    """
    g = np.abs(_series(g_values))
    per_step = g.max(axis=1)
    return float(per_step.mean()), float(per_step.max())


def trajectory_violation(system, traj):
    """:func:`violation_stats` for a trajectory of ``system``."""
    g = np.asarray(system.g_raw(traj.states, traj.times), dtype=np.float64) - system.offset
    return violation_stats(g)
