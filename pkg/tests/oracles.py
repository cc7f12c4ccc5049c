"""Independent reference implementations used to cross-check the package.

Each oracle is written from the defining formula with plain numpy loops and
shares no code with hrpinn.
"""

import numpy as np


def mlp_numpy(weights, biases, x):
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def dtw_bruteforce(a, b):
    """Textbook O(nm) DTW with a full cost table, row by row."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    n, m = len(a), len(b)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = np.sqrt(np.sum((a[i - 1] - b[j - 1]) ** 2))
            D[i, j] = c + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return D[n, m]


def rk_sum_scalar(x, coeffs, F=96487.0, n=1):
    """Redlich-Kister voltage as a plain Python sum, one term per coefficient."""
    u = 2.0 * x - 1.0
    total = 0.0
    for k, A in enumerate(coeffs):
        total += A * (u ** (k + 1) - (k * u - (x - 1.0)) * u ** (k - 1))
    return total / (n * F)


def project_circle_bruteforce(x_tilde, radius=1.0):
    """Closest point on a circle by dense angular search then refinement."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    th = np.linspace(-np.pi, np.pi, 200001)
    pts = radius * np.stack([np.cos(th), np.sin(th)], axis=1)
    k = np.argmin(np.sum((pts - x_tilde) ** 2, axis=1))
    lo, hi = th[max(k - 1, 0)], th[min(k + 1, len(th) - 1)]
    for _ in range(100):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        d1 = np.sum((radius * np.array([np.cos(m1), np.sin(m1)]) - x_tilde) ** 2)
        d2 = np.sum((radius * np.array([np.cos(m2), np.sin(m2)]) - x_tilde) ** 2)
        if d1 < d2:
            hi = m2
        else:
            lo = m1
    t = 0.5 * (lo + hi)
    return radius * np.array([np.cos(t), np.sin(t)])


def rk4_scalar_decay(x0, lam, dt, steps):
    """Classical RK4 on x' = -lam x, written out longhand."""
    x = x0
    for _ in range(steps):
        k1 = -lam * x
        k2 = -lam * (x + dt / 2 * k1)
        k3 = -lam * (x + dt / 2 * k2)
        k4 = -lam * (x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def _lm_coords(x):
    # rotate (q1, q2, p1, p2) so that q1*p2 - q2*p1 = ((u^2 + b^2) - (v^2 + a^2)) / 2
    q1, q2, p1, p2 = x
    s = np.sqrt(0.5)
    return s * (q1 + p2), s * (q2 - p1), s * (q1 - p2), s * (q2 + p1)


def _lm_state(u, b, v, a):
    s = np.sqrt(0.5)
    return np.stack([s * (u + v), s * (b + a), s * (a - b), s * (u - v)], axis=-1)


def project_angular_momentum_bruteforce(x_tilde, c, coarse=48):
    """Closest point on ``q1 p2 - q2 p1 = c`` (c > 0) by grid search.

    The level set is ``rho1^2 - rho2^2 = 2c`` with rho1 the radius in the
    (u, b) plane and rho2 in the (v, a) plane.  A coarse grid over
    (rho2, alpha, beta) picks the basin; the fine search then sweeps rho2
    densely with both angles aligned to x_tilde.
    """
    u, b, v, a = _lm_coords(np.asarray(x_tilde, dtype=np.float64))
    r1t, r2t = np.hypot(u, b), np.hypot(v, a)
    al_t, be_t = np.arctan2(b, u), np.arctan2(a, v)
    top = 2.0 * (np.hypot(r1t, r2t) + np.sqrt(2 * c) + 1.0)

    def point(r2, al, be):
        r1 = np.sqrt(2 * c + r2 ** 2)
        return _lm_state(r1 * np.cos(al), r1 * np.sin(al), r2 * np.cos(be), r2 * np.sin(be))

    R2, AL, BE = np.meshgrid(np.linspace(0, top, coarse), np.linspace(-np.pi, np.pi, coarse),
                             np.linspace(-np.pi, np.pi, coarse), indexing="ij")
    pts = point(R2.ravel(), AL.ravel(), BE.ravel())
    best = pts[np.argmin(np.sum((pts - x_tilde) ** 2, axis=1))]
    r2 = np.linspace(0, top, 200001)
    line = point(r2, al_t, be_t)
    d = np.sum((line - x_tilde) ** 2, axis=1)
    k = int(np.argmin(d))
    lo, hi = r2[max(k - 1, 0)], r2[min(k + 1, len(r2) - 1)]
    f = lambda r: np.sum((point(r, al_t, be_t) - x_tilde) ** 2)
    for _ in range(100):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if f(m1) < f(m2):
            hi = m2
        else:
            lo = m1
    fine = point(0.5 * (lo + hi), al_t, be_t)
    if np.sum((best - x_tilde) ** 2) < np.sum((fine - x_tilde) ** 2):
        return best
    return fine
