"""Ellipsoid algebra for bounded-uncertainty propagation.

An ellipsoid with center ``c`` and positive-semidefinite shape matrix ``M``
is the set ``{x : (x - c)^T M^+ (x - c) <= 1, (x - c) in range(M)}``.
Flat (rank-deficient) shape matrices are legal; the pseudoinverse plus
range-test convention above keeps membership well defined for them.
"""
from __future__ import annotations

import math

import numpy as np

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-10

UNIFORM_BALL = "uniform_ball"
NON_SYMMETRIC_90_10 = "non_symmetric_90_10"
SAMPLING_SCHEMES = (UNIFORM_BALL, NON_SYMMETRIC_90_10)


class DegenerateTraceError(ValueError):
    """Trace denominator too small to define a mixing parameter."""


def symmetrize(m) -> np.ndarray:
    """Average away round-off asymmetry."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def check_shape_matrix(m, name: str = "shape") -> np.ndarray:
    """Validate symmetry and positive semidefiniteness; return the symmetrized matrix."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {m.shape}")
    asym = float(np.abs(m - m.T).max(initial=0.0))
    if asym > SYMMETRY_TOL:
        raise ValueError(f"{name} not symmetric: max asymmetry {asym:.3e}")
    sym = symmetrize(m)
    min_eig = float(np.linalg.eigvalsh(sym).min())
    if min_eig < -PSD_TOL:
        raise ValueError(f"{name} not positive semidefinite: min eigenvalue {min_eig:.3e}")
    return sym


def psd_sqrt(m) -> np.ndarray:
    """Symmetric square root; tiny negative eigenvalues are clamped to zero."""
    evals, vecs = np.linalg.eigh(symmetrize(m))
    evals = np.clip(evals, 0.0, None)
    return symmetrize((vecs * np.sqrt(evals)) @ vecs.T)


class Ellipsoid:
    """Solid ellipsoid given by a center vector and a PSD shape matrix."""

    def __init__(self, center, shape):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.shape = check_shape_matrix(shape)
        if self.shape.shape[0] != self.center.size:
            raise ValueError(
                f"shape matrix is {self.shape.shape[0]}x{self.shape.shape[1]} "
                f"but center has length {self.center.size}"
            )

    @property
    def dim(self) -> int:
        return self.center.size

    def __repr__(self):
        return f"Ellipsoid(center={self.center!r}, shape={self.shape!r})"


def contains(e: Ellipsoid, x, tol: float = 0.0):
    """Membership test under the pseudoinverse convention.

    Accepts a single vector or a batch of vectors in rows; returns a bool or
    a boolean array accordingly. A point is inside when its quadratic form is
    at most ``1 + tol`` and its component outside ``range(M)`` is negligible
    relative to ``tol``.
    """
    if tol < 0.0:
        raise ValueError("tol must be nonnegative")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[-1] != e.dim:
        raise ValueError(f"point dimension {pts.shape[-1]} does not match ellipsoid dimension {e.dim}")
    d = pts - e.center
    evals, vecs = np.linalg.eigh(e.shape)
    cut = max(float(evals.max(initial=0.0)), 0.0) * 1e-12
    y = d @ vecs
    on = evals > cut
    quad = (y[:, on] ** 2 / evals[on]).sum(axis=1)
    resid_sq = (y[:, ~on] ** 2).sum(axis=1)
    dist_sq = (d ** 2).sum(axis=1)
    ok = (quad <= 1.0 + tol) & (resid_sq <= tol * (1.0 + dist_sq) + 1e-24)
    return bool(ok[0]) if single else ok


def affine_image(e: Ellipsoid, a, offset=None) -> Ellipsoid:
    """Image of the ellipsoid under ``x -> a x + offset``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[1] != e.dim:
        raise ValueError(f"map has {a.shape[1]} columns but ellipsoid dimension is {e.dim}")
    if offset is None:
        offset = np.zeros(a.shape[0])
    offset = np.atleast_1d(np.asarray(offset, dtype=float))
    if offset.shape != (a.shape[0],):
        raise ValueError(f"offset has length {offset.size}, expected {a.shape[0]}")
    return Ellipsoid(a @ e.center + offset, symmetrize(a @ e.shape @ a.T))


def minkowski_outer(m1, m2, p: float) -> np.ndarray:
    """Shape matrix of an ellipsoid containing E(0, m1) + E(0, m2).

    The bound ``(1/p + 1) m1 + (p + 1) m2`` is valid for every ``p > 0``;
    see :func:`trace_optimal_p` for the trace-minimizing choice.
    """
    if p <= 0.0:
        raise ValueError("mixing parameter p must be positive")
    m1 = np.atleast_2d(np.asarray(m1, dtype=float))
    m2 = np.atleast_2d(np.asarray(m2, dtype=float))
    if m1.shape != m2.shape:
        raise ValueError(f"shape matrices differ in size: {m1.shape} vs {m2.shape}")
    return symmetrize((1.0 / p + 1.0) * m1 + (p + 1.0) * m2)


def degenerate_trace_threshold(other_trace: float) -> float:
    return 1e-12 * (1.0 + other_trace)


def trace_optimal_p(m1, m2) -> float:
    """The p minimizing ``trace(minkowski_outer(m1, m2, p))`` over p > 0."""
    t1 = max(float(np.trace(np.atleast_2d(m1))), 0.0)
    t2 = float(np.trace(np.atleast_2d(m2)))
    if t2 <= degenerate_trace_threshold(t1):
        raise DegenerateTraceError(
            f"trace denominator {t2:.3e} is degenerate against numerator trace {t1:.3e}"
        )
    return math.sqrt(t1 / t2)


def mix_weights(m1, m2):
    """Combination weights for the trace-optimal outer bound of E(0,m1) + E(0,m2).

    Returns ``(w1, w2, p)`` such that ``w1 * m1 + w2 * m2`` bounds the sum.
    When one term has (near) zero trace it is treated as absent: the weights
    collapse to the surviving matrix and ``p`` is None.
    """
    t1 = max(float(np.trace(np.atleast_2d(m1))), 0.0)
    t2 = max(float(np.trace(np.atleast_2d(m2))), 0.0)
    deg1 = t1 <= degenerate_trace_threshold(t2)
    deg2 = t2 <= degenerate_trace_threshold(t1)
    if deg1 and deg2:
        return 1.0, 1.0, None
    if deg1:
        return 0.0, 1.0, None
    if deg2:
        return 1.0, 0.0, None
    p = math.sqrt(t1 / t2)
    return 1.0 / p + 1.0, p + 1.0, p


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


def volume(e: Ellipsoid) -> float:
    """Volume of the solid ellipsoid; zero for degenerate shapes."""
    evals = np.clip(np.linalg.eigvalsh(e.shape), 0.0, None)
    return unit_ball_volume(e.dim) * float(np.sqrt(np.prod(evals)))


def _uniform_ball(rng, shape):
    g = rng.standard_normal(shape)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    dirs = g / np.maximum(norm, 1e-300)
    radii = rng.random(shape[:-1] + (1,)) ** (1.0 / shape[-1])
    return dirs * radii


def sample(e: Ellipsoid, scheme: str, rng, size=None):
    """Draw points from the solid ellipsoid.

    ``uniform_ball`` draws uniformly over the set. ``non_symmetric_90_10``
    draws each normalized coordinate from (0, 1) with probability 0.9 and
    from (-1, 0) otherwise, radially rescales the vector into the unit ball
    when needed, and maps it through the symmetric square root of the shape.
    Returns one vector, or a ``(size, n)`` array when ``size`` is given.
    """
    if scheme not in SAMPLING_SCHEMES:
        raise ValueError(f"unknown sampling scheme {scheme!r}")
    n = e.dim
    out_shape = (n,) if size is None else (int(size), n)
    if scheme == UNIFORM_BALL:
        xi = _uniform_ball(rng, out_shape)
    else:
        mag = rng.random(out_shape)
        neg = rng.random(out_shape) >= 0.9
        xi = np.where(neg, -mag, mag)
        norm = np.linalg.norm(xi, axis=-1, keepdims=True)
        xi = np.where(norm > 1.0, xi / np.maximum(norm, 1e-300), xi)
    root = psd_sqrt(e.shape)
    return e.center + xi @ root
