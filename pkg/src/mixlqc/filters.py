"""Recursive state estimation tracking a covariance and a bounded set around one center.

The estimator carries a Gaussian error covariance and an ellipsoidal error
shape matrix simultaneously. Prediction propagates both through the dynamics,
with the bounded set inflated by a trace-optimal outer bound of the set sum.
The measurement update uses one shared gain obtained by minimizing the summed
traces of the posterior covariance and shape matrix; the gain and the set
mixing parameter are coupled and solved by fixed-point iteration.

Pure-Kalman and pure-set-membership baselines are provided as
:func:`kalman_step` and :func:`esm_step`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ellipsoid import UNIFORM_BALL, check_shape_matrix, mix_weights, symmetrize

QK_CORRECTED = "corrected"
QK_LITERAL = "paper_literal"
QK_FORMULAS = (QK_CORRECTED, QK_LITERAL)

GAIN_TOL = 1e-10
GAIN_MAX_ITER = 100


class GainConvergenceError(RuntimeError):
    """Gain fixed point failed to converge; carries the last iterate."""

    def __init__(self, message, gamma, q, residual):
        super().__init__(message)
        self.gamma = gamma
        self.q = q
        self.residual = residual


class GainFallbackWarning(UserWarning):
    """A filter step fell back to the initialization gain."""


@dataclass
class MixedBelief:
    """State estimate with a stochastic covariance and a bounded-error shape matrix."""

    center: np.ndarray
    covariance: np.ndarray
    shape: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        self.covariance = symmetrize(np.atleast_2d(self.covariance))
        self.shape = symmetrize(np.atleast_2d(self.shape))

    @property
    def dim(self) -> int:
        return self.center.size

    def validate(self) -> "MixedBelief":
        check_shape_matrix(self.covariance, "covariance")
        check_shape_matrix(self.shape, "shape")
        if self.covariance.shape[0] != self.dim or self.shape.shape[0] != self.dim:
            raise ValueError("belief matrices do not match the center dimension")
        if self.step < 0:
            raise ValueError("step must be nonnegative")
        return self


@dataclass
class SystemModel:
    """Time-indexed dynamics x_{k+1} = a(k) x_k + b(k) u_k, z_k = h(k) x_k + v_k."""

    a: Callable[[int], np.ndarray]
    b: Callable[[int], np.ndarray]
    h: Callable[[int], np.ndarray]
    n: int
    m: int
    r: int

    @classmethod
    def constant(cls, a, b, h) -> "SystemModel":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        h = np.atleast_2d(np.asarray(h, dtype=float))
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError(f"state matrix must be square, got {a.shape}")
        if b.shape[0] != n:
            raise ValueError(f"control matrix has {b.shape[0]} rows, expected {n}")
        if h.shape[1] != n:
            raise ValueError(f"measurement matrix has {h.shape[1]} columns, expected {n}")
        return cls(lambda k: a, lambda k: b, lambda k: h, n, h.shape[0], b.shape[1])


@dataclass
class NoiseModel:
    """Per-step covariances (stochastic parts) and shape matrices (bounded parts)."""

    pw: Callable[[int], np.ndarray]
    pv: Callable[[int], np.ndarray]
    mw: Callable[[int], np.ndarray]
    mv: Callable[[int], np.ndarray]
    scheme_w: str = UNIFORM_BALL
    scheme_v: str = UNIFORM_BALL

    @classmethod
    def constant(cls, pw, pv, mw, mv, scheme_w=UNIFORM_BALL, scheme_v=UNIFORM_BALL) -> "NoiseModel":
        pw = symmetrize(np.atleast_2d(pw))
        pv = symmetrize(np.atleast_2d(pv))
        mw = symmetrize(np.atleast_2d(mw))
        mv = symmetrize(np.atleast_2d(mv))
        return cls(lambda k: pw, lambda k: pv, lambda k: mw, lambda k: mv, scheme_w, scheme_v)

    def with_zero_covariances(self) -> "NoiseModel":
        pw, pv = self.pw, self.pv
        return NoiseModel(
            pw=lambda k: np.zeros_like(np.atleast_2d(np.asarray(pw(k), dtype=float))),
            pv=lambda k: np.zeros_like(np.atleast_2d(np.asarray(pv(k), dtype=float))),
            mw=self.mw,
            mv=self.mv,
            scheme_w=self.scheme_w,
            scheme_v=self.scheme_v,
        )


def predict(belief: MixedBelief, model: SystemModel, noise: NoiseModel, u) -> MixedBelief:
    """Propagate a belief one step through the dynamics.

    The covariance follows the usual linear propagation plus process
    covariance; the bounded set becomes the trace-optimal outer bound of the
    propagated set summed with the bounded process set. A vanished set term
    is dropped rather than dividing by a zero trace.
    """
    k = belief.step
    a = np.atleast_2d(np.asarray(model.a(k), dtype=float))
    b = np.atleast_2d(np.asarray(model.b(k), dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.r,):
        raise ValueError(f"control has length {u.size}, expected {model.r}")
    if belief.dim != model.n:
        raise ValueError(f"belief dimension {belief.dim} does not match model dimension {model.n}")
    center = a @ belief.center + b @ u
    cov = symmetrize(a @ belief.covariance @ a.T + np.atleast_2d(noise.pw(k)))
    propagated = symmetrize(a @ belief.shape @ a.T)
    mw = symmetrize(np.atleast_2d(noise.mw(k)))
    w1, w2, _ = mix_weights(propagated, mw)
    shape = symmetrize(w1 * propagated + w2 * mw)
    return MixedBelief(center, cov, shape, k + 1)


def _solve_right(num, s):
    # gamma @ s = num  ->  gamma = num s^{-1}, pseudoinverse when s is singular
    try:
        return np.linalg.solve(s.T, num.T).T
    except np.linalg.LinAlgError:
        return num @ np.linalg.pinv(s, rcond=1e-12, hermitian=True)


def _set_weights(gamma, h_mat, m_pred, mv, mw, n, qk_formula):
    ikh = np.eye(n) - gamma @ h_mat
    if qk_formula == QK_CORRECTED:
        s1 = ikh @ m_pred @ ikh.T
        s2 = gamma @ mv @ gamma.T
    else:
        ig = np.eye(n) - gamma
        s1 = ig @ m_pred @ ig.T
        s2 = gamma @ mw @ gamma.T
    return mix_weights(s1, s2)


def gain(
    pred: MixedBelief,
    model: SystemModel,
    noise: NoiseModel,
    qk_formula: str = QK_CORRECTED,
    tol: float = GAIN_TOL,
    max_iter: int = GAIN_MAX_ITER,
    on_nonconvergence: str = "raise",
):
    """Measurement gain and set-mixing parameter for the update at ``pred.step``.

    The gain minimizing the summed posterior traces depends on the mixing
    parameter q, and q is the trace-optimal parameter of the two posterior
    set terms, which depend on the gain. The pair is solved by fixed-point
    iteration seeded from the pure-covariance gain, with a scalar-root
    bisection phase for slowly contracting cases; states whose parameter
    runs away have no finite fixed point and take the fallback policy.
    Returns ``(gamma, q)``; q is None when a bounded term vanished and the
    mixing collapsed.

    ``qk_formula`` selects the q update: "corrected" (default) uses the
    trace-optimal ratio of the two posterior set terms; "paper_literal"
    keeps the uncorrected published form, which is only defined when the
    measurement and state dimensions agree.
    """
    if qk_formula not in QK_FORMULAS:
        raise ValueError(f"unknown qk_formula {qk_formula!r}")
    if on_nonconvergence not in ("raise", "fallback"):
        raise ValueError(f"unknown non-convergence policy {on_nonconvergence!r}")
    k = pred.step
    h_mat = np.atleast_2d(np.asarray(model.h(k), dtype=float))
    pv = symmetrize(np.atleast_2d(noise.pv(k)))
    mv = symmetrize(np.atleast_2d(noise.mv(k)))
    mw = symmetrize(np.atleast_2d(noise.mw(k)))
    if qk_formula == QK_LITERAL and model.m != model.n:
        raise ValueError("paper_literal q requires as many measurements as states")
    p_pred = pred.covariance
    m_pred = pred.shape
    n = model.n

    ph_t = p_pred @ h_mat.T
    mh_t = m_pred @ h_mat.T
    hph = h_mat @ ph_t
    hmh = h_mat @ mh_t

    def gamma_of(w1, w2):
        num = ph_t + w1 * mh_t
        s = symmetrize(hph + pv + w1 * hmh + w2 * mv)
        return _solve_right(num, s)

    def next_q(gamma):
        return _set_weights(gamma, h_mat, m_pred, mv, mw, n, qk_formula)

    gamma_kf = _solve_right(ph_t, symmetrize(hph + pv))
    w1, w2, q0 = next_q(gamma_kf)
    gamma0 = gamma_of(w1, w2)

    gamma = gamma0
    q = q0
    prev_q = q0
    residual = math.inf
    q_low = q_high = q0 if q0 is not None else 1.0
    plain_iters = min(60, max_iter)
    for it in range(1, plain_iters + 1):
        w1, w2, q_new = next_q(gamma)
        if it > 20 and q_new is not None and prev_q is not None and q_new > 0.0 and prev_q > 0.0:
            # damp slow oscillation of the scalar parameter
            q_new = math.sqrt(q_new * prev_q)
            w1, w2 = 1.0 / q_new + 1.0, q_new + 1.0
        new_gamma = gamma_of(w1, w2)
        residual = float(np.linalg.norm(new_gamma - gamma))
        gamma = new_gamma
        prev_q = q = q_new
        if q is not None and q > 0.0:
            q_low, q_high = min(q_low, q), max(q_high, q)
        if residual <= tol:
            return gamma, q

    # slow contraction: the coupled equations reduce to a scalar root problem
    # in q, which bisection solves whenever a finite root exists; a parameter
    # that exploded through many decades has no finite root to look for
    def q_gap(q_try):
        g = gamma_of(1.0 / q_try + 1.0, q_try + 1.0)
        _, _, q_out = next_q(g)
        if q_out is None:
            return None
        return q_out - q_try

    exploded = q_low > 0.0 and q_high / q_low > 1e6
    root = None
    if not exploded and q is not None and q > 0.0:
        grid = q * np.logspace(-6.0, 6.0, 49)
        gaps = [q_gap(qt) for qt in grid]
        for i in range(len(grid) - 1):
            lo_gap, hi_gap = gaps[i], gaps[i + 1]
            if lo_gap is None or hi_gap is None:
                continue
            if lo_gap == 0.0:
                root = grid[i]
                break
            if lo_gap * hi_gap < 0.0:
                lo, hi = grid[i], grid[i + 1]
                for _ in range(80):
                    mid = 0.5 * (lo + hi)
                    mid_gap = q_gap(mid)
                    if mid_gap is None or mid_gap == 0.0 or (hi - lo) <= 1e-15 * mid:
                        break
                    if lo_gap * mid_gap <= 0.0:
                        hi = mid
                    else:
                        lo = mid
                        lo_gap = mid_gap
                root = 0.5 * (lo + hi)
                break
    if root is not None:
        gamma = gamma_of(1.0 / root + 1.0, root + 1.0)
        w1, w2, q_check = next_q(gamma)
        if q_check is not None:
            new_gamma = gamma_of(w1, w2)
            residual = float(np.linalg.norm(new_gamma - gamma))
            if residual <= tol:
                return new_gamma, q_check

    if on_nonconvergence == "fallback":
        warnings.warn(
            f"gain fixed point stalled (residual {residual:.2e}); using initialization gain",
            GainFallbackWarning,
        )
        return gamma0, q0
    raise GainConvergenceError(
        f"gain fixed point did not converge in {max_iter} iterations (residual {residual:.2e})",
        gamma,
        q,
        residual,
    )


def update(
    pred: MixedBelief,
    z,
    model: SystemModel,
    noise: NoiseModel,
    qk_formula: str = QK_CORRECTED,
    on_nonconvergence: str = "fallback",
) -> MixedBelief:
    """Fold one measurement into a predicted belief.

    The covariance update uses the symmetrized (Joseph) form, which stays PSD
    for any gain; the shape update combines the two posterior set terms with
    the mixing weights evaluated at the returned gain.
    """
    k = pred.step
    h_mat = np.atleast_2d(np.asarray(model.h(k), dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (model.m,):
        raise ValueError(f"measurement has length {z.size}, expected {model.m}")
    gamma, _ = gain(
        pred, model, noise, qk_formula=qk_formula, on_nonconvergence=on_nonconvergence
    )
    pv = symmetrize(np.atleast_2d(noise.pv(k)))
    mv = symmetrize(np.atleast_2d(noise.mv(k)))
    mw = symmetrize(np.atleast_2d(noise.mw(k)))
    ikh = np.eye(model.n) - gamma @ h_mat
    center = pred.center + gamma @ (z - h_mat @ pred.center)
    cov = symmetrize(ikh @ pred.covariance @ ikh.T + gamma @ pv @ gamma.T)
    w1, w2, _ = _set_weights(gamma, h_mat, pred.shape, mv, mw, model.n, qk_formula)
    shape = symmetrize(w1 * (ikh @ pred.shape @ ikh.T) + w2 * (gamma @ mv @ gamma.T))
    return MixedBelief(center, cov, shape, k)


def mixed_step(
    belief: MixedBelief,
    model: SystemModel,
    noise: NoiseModel,
    u,
    z,
    qk_formula: str = QK_CORRECTED,
    on_nonconvergence: str = "fallback",
) -> MixedBelief:
    """Predict with control u, then update with measurement z."""
    pred = predict(belief, model, noise, u)
    return update(pred, z, model, noise, qk_formula=qk_formula, on_nonconvergence=on_nonconvergence)


def kalman_step(belief: MixedBelief, model: SystemModel, noise: NoiseModel, u, z) -> MixedBelief:
    """Plain Kalman predict/update; bounded noise sets are ignored entirely."""
    k = belief.step
    a = np.atleast_2d(np.asarray(model.a(k), dtype=float))
    b = np.atleast_2d(np.asarray(model.b(k), dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    center = a @ belief.center + b @ u
    cov = symmetrize(a @ belief.covariance @ a.T + np.atleast_2d(noise.pw(k)))
    h_mat = np.atleast_2d(np.asarray(model.h(k + 1), dtype=float))
    pv = symmetrize(np.atleast_2d(noise.pv(k + 1)))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    ph_t = cov @ h_mat.T
    gamma = _solve_right(ph_t, symmetrize(h_mat @ ph_t + pv))
    ikh = np.eye(model.n) - gamma @ h_mat
    center = center + gamma @ (z - h_mat @ center)
    cov = symmetrize(ikh @ cov @ ikh.T + gamma @ pv @ gamma.T)
    return MixedBelief(center, cov, np.zeros((model.n, model.n)), k + 1)


def esm_step(
    belief: MixedBelief,
    model: SystemModel,
    noise: NoiseModel,
    u,
    z,
    qk_formula: str = QK_CORRECTED,
    on_nonconvergence: str = "fallback",
) -> MixedBelief:
    """Pure bounded-set recursion: the mixed step with all covariances zeroed."""
    zeros = np.zeros((model.n, model.n))
    start = MixedBelief(belief.center, zeros, belief.shape, belief.step)
    noise0 = noise.with_zero_covariances()
    pred = predict(start, model, noise0, u)
    return update(pred, z, model, noise0, qk_formula=qk_formula, on_nonconvergence=on_nonconvergence)
