"""Independent oracles used by the test suite.

Everything here is deliberately written against the math directly (brute
force, grids, textbook recursions) rather than reusing the library's own
code paths, so the tests compare two independent routes to each value.
"""
import numpy as np


def random_psd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T) / n


def reference_kalman(a_fn, b_fn, h_fn, pw_fn, pv_fn, x0, p0, controls, measurements):
    """Textbook Kalman filter; returns the center trajectory (including step 0)."""
    x = np.array(x0, dtype=float)
    p = np.array(p0, dtype=float)
    centers = [x.copy()]
    n = x.size
    for k, (u, z) in enumerate(zip(controls, measurements)):
        a = a_fn(k)
        x = a @ x + b_fn(k) @ np.atleast_1d(u)
        p = a @ p @ a.T + pw_fn(k)
        h = h_fn(k + 1)
        s = h @ p @ h.T + pv_fn(k + 1)
        gain = p @ h.T @ np.linalg.inv(s)
        x = x + gain @ (np.atleast_1d(z) - h @ x)
        ikh = np.eye(n) - gain @ h
        p = ikh @ p @ ikh.T + gain @ pv_fn(k + 1) @ gain.T
        centers.append(x.copy())
    return np.array(centers)


def riccati_first_control(a_list, b_list, q_list, r_list, xhat):
    """Finite-horizon LQ regulator for cost sum x_{t+1}'Q_t x_{t+1} + u_t'R_t u_t.

    Backward recursion with the state cost shifted one step ahead; returns
    the first optimal input for initial state xhat.
    """
    n = a_list[0].shape[0]
    s = np.zeros((n, n))
    first_gain = None
    for t in range(len(a_list) - 1, -1, -1):
        tmat = q_list[t] + s
        a, b = a_list[t], b_list[t]
        gain = np.linalg.solve(r_list[t] + b.T @ tmat @ b, b.T @ tmat @ a)
        s = a.T @ tmat @ a - a.T @ tmat @ b @ gain
        s = 0.5 * (s + s.T)
        first_gain = gain
    return -first_gain @ np.asarray(xhat, dtype=float)


def sample_eta_grid(rng, m_belief, mw_blocks, count):
    """Points on and inside the two constraint ellipsoids of the worst-case problem.

    Returns an array of stacked vectors [e; W] with e in E(0, m_belief) and
    W in E(0, blockdiag(mw_blocks)), half of them pushed to the boundaries.
    """
    def sqrtm(m):
        w, v = np.linalg.eigh(m)
        return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T

    n = m_belief.shape[0]
    wdim = sum(b.shape[0] for b in mw_blocks)
    wstack = np.zeros((wdim, wdim))
    at = 0
    for b in mw_blocks:
        wstack[at:at + b.shape[0], at:at + b.shape[0]] = b
        at += b.shape[0]

    def ball(dim, count):
        g = rng.normal(size=(count, dim))
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        radii = rng.random((count, 1)) ** (1.0 / dim)
        pts = g * radii
        pts[::2] = g[::2]  # every other point on the boundary
        return pts

    e = ball(n, count) @ sqrtm(m_belief)
    w = ball(wdim, count) @ sqrtm(wstack)
    return np.hstack([e, w])


def scalar_minmax_grid(objective, y_grid, eta_grids):
    """Brute-force min over y of max over the eta product grid."""
    best_y, best_val = None, np.inf
    meshes = np.meshgrid(*eta_grids, indexing="ij")
    etas = np.stack([m.ravel() for m in meshes], axis=1)
    for y in y_grid:
        worst = max(objective(y, eta) for eta in etas)
        if worst < best_val:
            best_val, best_y = worst, y
    return best_y, best_val
