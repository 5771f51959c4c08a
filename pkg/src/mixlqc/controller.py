"""Receding-horizon robust linear-quadratic control.

The window cost is expanded into quadratic forms in the current estimate,
the stacked control vector, and the stacked bounded uncertainties (current
bounded estimation error plus bounded process noises). Minimizing the
worst case over the two uncertainty ellipsoids reduces, through a pair of
nonnegative multipliers and a Schur complement, to a small semidefinite
program whose block constraint is assembled here explicitly.

The solver exploits the structure: for fixed multipliers the optimal shift
and the optimal bound have closed forms, leaving a two-variable convex
minimization handled by a log-barrier interior-point Newton path. Every
returned solution carries a certificate recomputed from the assembled block
matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .ellipsoid import check_shape_matrix, symmetrize
from .filters import MixedBelief, NoiseModel, SystemModel


class SdpInfeasibleError(RuntimeError):
    """No multiplier pair renders the constraint block feasible."""


class SdpConvergenceError(RuntimeError):
    """Solver hit its iteration limit; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class SolverOptions:
    feasibility_tol: float = 1e-8
    objective_tol: float = 1e-6
    max_iterations: int = 200
    warm_tau: Optional[tuple] = None


@dataclass
class CostSpec:
    """Quadratic stage costs: q(k) on the state, r(k) on the control, over a horizon."""

    q: Callable[[int], np.ndarray]
    r: Callable[[int], np.ndarray]
    horizon: int

    @classmethod
    def constant(cls, q, r, horizon: int) -> "CostSpec":
        q = check_shape_matrix(q, "q")
        r = symmetrize(np.atleast_2d(r))
        if float(np.linalg.eigvalsh(r).min()) <= 0.0:
            raise ValueError("control cost r must be positive definite")
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        return cls(lambda k: q, lambda k: r, int(horizon))


@dataclass
class HorizonMatrices:
    """Stacked propagation matrices over the window [start, start + horizon).

    For each offset j, states obey
    ``x_{start+j+1} = a_blocks[j] x_start + b_blocks[j] U + c_blocks[j] W``
    with U the stacked controls and W the stacked process noises.
    """

    start: int
    horizon: int
    n: int
    r: int
    a_blocks: np.ndarray  # (N, n, n)
    b_blocks: np.ndarray  # (N, n, N*r)
    c_blocks: np.ndarray  # (N, n, N*n)

    def a_tilde(self, t: int) -> np.ndarray:
        return self.a_blocks[t - self.start]

    def b_tilde(self, t: int) -> np.ndarray:
        return self.b_blocks[t - self.start]

    def c_plain(self, t: int) -> np.ndarray:
        return self.c_blocks[t - self.start]

    def c_tilde(self, t: int) -> np.ndarray:
        return np.hstack([self.a_tilde(t), self.c_plain(t)])

    @property
    def control_dim(self) -> int:
        return self.horizon * self.r

    @property
    def noise_dim(self) -> int:
        return self.horizon * self.n

    @property
    def eta_dim(self) -> int:
        return (self.horizon + 1) * self.n


def build_horizon(model: SystemModel, k: int, n_horizon: int) -> HorizonMatrices:
    """Stack the dynamics so every state in the window is affine in (x_k, U, W).

    Later step matrices multiply on the left, the unique ordering under which
    the stacked form reproduces step-by-step simulation.
    """
    if n_horizon < 1:
        raise ValueError("horizon must be at least 1")
    n, r = model.n, model.r
    big_n = int(n_horizon)
    a_blocks = np.zeros((big_n, n, n))
    b_blocks = np.zeros((big_n, n, big_n * r))
    c_blocks = np.zeros((big_n, n, big_n * n))
    a_prev = np.eye(n)
    b_prev = np.zeros((n, big_n * r))
    c_prev = np.zeros((n, big_n * n))
    for j in range(big_n):
        a_j = np.atleast_2d(np.asarray(model.a(k + j), dtype=float))
        b_j = np.atleast_2d(np.asarray(model.b(k + j), dtype=float))
        a_cur = a_j @ a_prev
        b_cur = a_j @ b_prev
        b_cur[:, j * r:(j + 1) * r] += b_j
        c_cur = a_j @ c_prev
        c_cur[:, j * n:(j + 1) * n] += np.eye(n)
        a_blocks[j] = a_cur
        b_blocks[j] = b_cur
        c_blocks[j] = c_cur
        a_prev, b_prev, c_prev = a_cur, b_cur, c_cur
    return HorizonMatrices(int(k), big_n, n, r, a_blocks, b_blocks, c_blocks)


@dataclass
class HorizonCost:
    """Quadratic expansion of the expected window cost.

    ``E J = xhat' aa xhat + U' bb U + eta' cc eta + 2 b_hat' U
    + 2 U' dd eta + 2 c_hat' eta + constant`` where eta stacks the bounded
    estimation error and the bounded process noises.
    """

    start: int
    horizon: int
    n: int
    r: int
    aa: np.ndarray
    bb: np.ndarray
    cc: np.ndarray
    dd: np.ndarray
    b_hat: np.ndarray
    c_hat: np.ndarray
    constant: float


def assemble_cost(
    hm: HorizonMatrices, cost: CostSpec, belief: MixedBelief, noise: NoiseModel
) -> HorizonCost:
    """Expand the expected window cost around the current belief."""
    if belief.step != hm.start:
        raise ValueError(f"belief is at step {belief.step} but the horizon starts at {hm.start}")
    k, big_n, n, r = hm.start, hm.horizon, hm.n, hm.r
    nu = big_n * r
    d = (big_n + 1) * n
    aa = np.zeros((n, n))
    bb = np.zeros((nu, nu))
    cc = np.zeros((d, d))
    dd = np.zeros((nu, d))
    ba = np.zeros((nu, n))
    ca = np.zeros((d, n))
    cqc = np.zeros((big_n * n, big_n * n))
    for j in range(big_n):
        qt = np.atleast_2d(np.asarray(cost.q(k + j + 1), dtype=float))
        at = hm.a_blocks[j]
        bt = hm.b_blocks[j]
        ct = hm.c_blocks[j]
        ctil = np.hstack([at, ct])
        qa = qt @ at
        qc = qt @ ctil
        aa += at.T @ qa
        bb += bt.T @ (qt @ bt)
        cc += ctil.T @ qc
        dd += bt.T @ qc
        ba += bt.T @ qa
        ca += ctil.T @ qa
        cqc += ct.T @ (qt @ ct)
    bb += scipy.linalg.block_diag(*[np.atleast_2d(np.asarray(cost.r(k + j), dtype=float)) for j in range(big_n)])
    pw_stack = scipy.linalg.block_diag(*[np.atleast_2d(np.asarray(noise.pw(k + j), dtype=float)) for j in range(big_n)])
    constant = float(np.trace(aa @ belief.covariance) + np.trace(cqc @ pw_stack))
    return HorizonCost(
        start=k,
        horizon=big_n,
        n=n,
        r=r,
        aa=symmetrize(aa),
        bb=symmetrize(bb),
        cc=symmetrize(cc),
        dd=dd,
        b_hat=ba @ belief.center,
        c_hat=ca @ belief.center,
        constant=constant,
    )


@dataclass
class SdpInstance:
    """Worst-case cost data in shifted coordinates.

    The objective against the stacked bounded vector eta is
    ``y'y + 2 h' eta + 2 y' f eta + eta' cc eta`` with eta constrained to the
    two ellipsoids encoded by the inverse-shape blocks m1 (estimation-error
    part) and m2 (process-noise part).
    """

    h: np.ndarray
    f: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    cc: np.ndarray
    constant: float

    @property
    def y_dim(self) -> int:
        return self.f.shape[0]

    @property
    def eta_dim(self) -> int:
        return self.h.size


def _inv_sqrt_pd(m):
    evals, vecs = np.linalg.eigh(symmetrize(m))
    if float(evals.min()) <= 0.0:
        raise ValueError("matrix must be positive definite")
    inv = (vecs / evals) @ vecs.T
    inv_sqrt = (vecs / np.sqrt(evals)) @ vecs.T
    return symmetrize(inv), symmetrize(inv_sqrt)


def regularized_inverse(m) -> np.ndarray:
    """Invert a shape matrix, nudging singular ones so the constraint stays finite.

    Singular shapes get ``1e-10 * trace`` added to the diagonal, with a small
    absolute floor so an exactly-zero set degrades to a tiny ball instead of
    an unusable constraint.
    """
    m = symmetrize(np.atleast_2d(m))
    tr = max(float(np.trace(m)), 0.0)
    evals = np.linalg.eigvalsh(m)
    if float(evals.min()) <= 1e-12 * max(1.0, tr):
        m = m + (1e-10 * tr + 1e-12) * np.eye(m.shape[0])
    return symmetrize(np.linalg.inv(m))


def build_sdp(hc: HorizonCost, belief: MixedBelief, noise: NoiseModel) -> SdpInstance:
    """Shift out the control-dependent part of the cost and encode the constraints."""
    b_inv, b_inv_sqrt = _inv_sqrt_pd(hc.bb)
    h = hc.c_hat - hc.dd.T @ (b_inv @ hc.b_hat)
    f = b_inv_sqrt @ hc.dd
    n, big_n, k = hc.n, hc.horizon, hc.start
    d = (big_n + 1) * n
    m1 = np.zeros((d, d))
    m1[:n, :n] = regularized_inverse(belief.shape)
    m2 = np.zeros((d, d))
    for j in range(big_n):
        lo = n + j * n
        m2[lo:lo + n, lo:lo + n] = regularized_inverse(noise.mw(k + j))
    return SdpInstance(h=h, f=f, m1=m1, m2=m2, cc=symmetrize(hc.cc), constant=hc.constant)


@dataclass
class SdpSolution:
    y: np.ndarray
    rho: float
    tau1: float
    tau2: float
    min_eig_certificate: float
    iterations: int


def assemble_lmi_block(inst: SdpInstance, y, rho: float, tau1: float, tau2: float) -> np.ndarray:
    """Full block matrix whose positive semidefiniteness certifies a solution."""
    y = np.asarray(y, dtype=float).reshape(-1)
    g = symmetrize(-inst.cc + tau1 * inst.m1 + tau2 * inst.m2 + inst.f.T @ inst.f)
    ny, d = inst.y_dim, inst.eta_dim
    block = np.zeros((ny + 1 + d, ny + 1 + d))
    block[:ny, :ny] = np.eye(ny)
    block[:ny, ny] = y
    block[ny, :ny] = y
    block[:ny, ny + 1:] = inst.f
    block[ny + 1:, :ny] = inst.f.T
    block[ny, ny] = rho - tau1 - tau2
    block[ny, ny + 1:] = -inst.h
    block[ny + 1:, ny] = -inst.h
    block[ny + 1:, ny + 1:] = g
    return block


def multiplier_stage_block(inst: SdpInstance, y, rho: float, tau1: float, tau2: float) -> np.ndarray:
    """Pre-Schur form of the constraint; PSD of this is equivalent to the full block."""
    y = np.asarray(y, dtype=float).reshape(-1)
    s = symmetrize(-inst.cc + tau1 * inst.m1 + tau2 * inst.m2)
    top = rho - tau1 - tau2 - float(y @ y)
    cross = -(inst.h + inst.f.T @ y)
    d = inst.eta_dim
    block = np.zeros((d + 1, d + 1))
    block[0, 0] = top
    block[0, 1:] = cross
    block[1:, 0] = cross
    block[1:, 1:] = s
    return block


def worst_case_objective(inst: SdpInstance, y, eta) -> float:
    """Objective value bounded by rho: y'y + 2 h' eta + 2 y' f eta + eta' cc eta."""
    y = np.asarray(y, dtype=float).reshape(-1)
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        return float(y @ y + 2.0 * inst.h @ eta + 2.0 * y @ (inst.f @ eta) + eta @ (inst.cc @ eta))
    lin = 2.0 * eta @ inst.h + 2.0 * eta @ (inst.f.T @ y)
    quad = np.einsum("ij,jk,ik->i", eta, inst.cc, eta)
    return float(y @ y) + lin + quad


def solve_sdp(inst: SdpInstance, opts: Optional[SolverOptions] = None) -> SdpSolution:
    """Minimize the worst-case bound rho over the shift y and the two multipliers.

    For fixed multipliers tau the optimal shift is ``y = -f G^{-1} h`` and the
    bound is ``phi(tau) = tau1 + tau2 + h' G^{-1} h`` with
    ``G = -cc + tau1 m1 + tau2 m2 + f'f``, subject to
    ``S = G - f'f >= 0`` and ``tau >= 0``. That two-variable problem is
    jointly convex and is solved by a log-barrier interior-point iteration
    (Newton on ``phi - mu (logdet S + log tau1 + log tau2)`` along a
    decreasing barrier path), which handles optima on the constraint
    boundary without stalling and keeps every iterate strictly feasible.
    """
    opts = SolverOptions() if opts is None else opts
    h = np.asarray(inst.h, dtype=float).reshape(-1)
    f = np.asarray(inst.f, dtype=float)
    cc = symmetrize(inst.cc)
    m1 = symmetrize(inst.m1)
    m2 = symmetrize(inst.m2)
    ftf = symmetrize(f.T @ f)
    d = h.size
    nu = d + 2.0  # barrier parameter: logdet(S) plus two log terms
    scale = 1.0 + float(np.abs(cc).max(initial=0.0))
    iters = [0]

    def factor_state(tau):
        """Cholesky factors of S and G at strictly feasible tau, else None."""
        if not (np.all(np.isfinite(tau)) and tau[0] > 0.0 and tau[1] > 0.0):
            return None
        s = symmetrize(tau[0] * m1 + tau[1] * m2 - cc)
        try:
            cf_s = scipy.linalg.cho_factor(s, lower=True, check_finite=False)
            cf_g = scipy.linalg.cho_factor(symmetrize(ftf + s), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        x = scipy.linalg.cho_solve(cf_g, h, check_finite=False)
        phi = float(tau[0] + tau[1] + h @ x)
        logdet_s = 2.0 * float(np.sum(np.log(np.diag(cf_s[0]))))
        return phi, logdet_s, cf_s, cf_g, x

    def merit(state, tau, mu):
        phi, logdet_s = state[0], state[1]
        return phi - mu * (logdet_s + math.log(tau[0]) + math.log(tau[1]))

    def initial_tau():
        msum = symmetrize(m1 + m2)
        try:
            lam = scipy.linalg.eigh(cc, msum, eigvals_only=True, check_finite=False)
            t = max(float(lam[-1]), 0.0) * 2.0 + 1e-8 * scale + 1e-8
        except (np.linalg.LinAlgError, ValueError):
            t = max(scale, 1.0)
        for _ in range(200):
            if factor_state((t, t)) is not None:
                return np.array([t, t])
            t = 2.0 * t + 1.0
        raise SdpInfeasibleError("no multipliers render the uncertainty constraints feasible")

    def barrier_newton(tau, state, mu, max_iter):
        for _ in range(max_iter):
            iters[0] += 1
            _, _, cf_s, cf_g, x = state
            u1 = m1 @ x
            u2 = m2 @ x
            v1 = scipy.linalg.cho_solve(cf_g, u1, check_finite=False)
            v2 = scipy.linalg.cho_solve(cf_g, u2, check_finite=False)
            w1 = scipy.linalg.cho_solve(cf_s, m1, check_finite=False)
            w2 = scipy.linalg.cho_solve(cf_s, m2, check_finite=False)
            grad = np.array(
                [
                    1.0 - x @ u1 - mu * (float(np.trace(w1)) + 1.0 / tau[0]),
                    1.0 - x @ u2 - mu * (float(np.trace(w2)) + 1.0 / tau[1]),
                ]
            )
            h11 = 2.0 * (u1 @ v1) + mu * (float(np.sum(w1 * w1.T)) + 1.0 / tau[0] ** 2)
            h22 = 2.0 * (u2 @ v2) + mu * (float(np.sum(w2 * w2.T)) + 1.0 / tau[1] ** 2)
            h12 = 2.0 * (u1 @ v2) + mu * float(np.sum(w1 * w2.T))
            hess = np.array([[h11, h12], [h12, h22]])
            hess[0, 0] += 1e-14 * (1.0 + abs(h11))
            hess[1, 1] += 1e-14 * (1.0 + abs(h22))
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                step = -grad
            decrement = -float(grad @ step)
            if decrement <= 0.0:
                step = -grad
                decrement = float(grad @ grad)
            if 0.5 * decrement <= 0.05 * mu:
                break
            base = merit(state, tau, mu)
            alpha = 1.0
            moved = False
            for _ls in range(50):
                cand = tau + alpha * step
                cand_state = factor_state(cand)
                if cand_state is not None and merit(cand_state, cand, mu) <= base - 1e-4 * alpha * decrement:
                    tau, state = cand, cand_state
                    moved = True
                    break
                alpha *= 0.5
            if not moved:
                break
        return tau, state

    def barrier_path(tau_start, warm):
        tau = np.asarray(tau_start, dtype=float)
        state = factor_state(tau)
        if state is None:
            return None
        mu = (1.0 + abs(state[0])) / nu * (1e-2 if warm else 1.0)
        mu_min = max(opts.objective_tol, 1e-9) * (1.0 + abs(state[0])) / (50.0 * nu)
        budget = max(opts.max_iterations, 40)
        while mu > mu_min and iters[0] < budget * 10:
            tau, state = barrier_newton(tau, state, mu, max_iter=20)
            mu /= 12.0
        tau, state = barrier_newton(tau, state, mu_min, max_iter=30)
        return tau, state

    candidates = []
    if opts.warm_tau is not None:
        warm_tau = np.maximum(np.asarray(opts.warm_tau, dtype=float), 1e-300)
        res = barrier_path(warm_tau, warm=True)
        if res is not None:
            candidates.append(res)
    if not candidates:
        res = barrier_path(initial_tau(), warm=False)
        if res is not None:
            candidates.append(res)
    if not candidates:
        raise SdpInfeasibleError("no feasible starting multipliers found")
    tau, state = min(candidates, key=lambda c: c[1][0])
    rho, _, _, _, x = state
    y = -(f @ x)
    cert = float(np.linalg.eigvalsh(symmetrize(assemble_lmi_block(inst, y, rho, tau[0], tau[1])))[0])
    repairs = 0
    while cert < -opts.feasibility_tol and repairs < 4:
        rho += 2.0 * (-cert) + opts.feasibility_tol
        cert = float(np.linalg.eigvalsh(symmetrize(assemble_lmi_block(inst, y, rho, tau[0], tau[1])))[0])
        repairs += 1
    solution = SdpSolution(
        y=y,
        rho=float(rho),
        tau1=float(tau[0]),
        tau2=float(tau[1]),
        min_eig_certificate=cert,
        iterations=iters[0],
    )
    if cert < -1e-6:
        raise SdpConvergenceError(
            f"certificate failed: min eigenvalue {cert:.3e}", best=solution
        )
    return solution


def recover_control(sol: SdpSolution, hc: HorizonCost, r_dim: Optional[int] = None) -> np.ndarray:
    """Map the shifted decision vector back to the stacked control; return the first input."""
    _, b_inv_sqrt = _inv_sqrt_pd(hc.bb)
    u_stack = b_inv_sqrt @ sol.y - np.linalg.solve(hc.bb, hc.b_hat)
    r_dim = hc.r if r_dim is None else int(r_dim)
    return u_stack[:r_dim]


def certainty_equivalent_control(hc: HorizonCost, r_dim: Optional[int] = None) -> np.ndarray:
    """First input of the deterministic-cost minimizer; the solver-failure fallback."""
    u_stack = -np.linalg.solve(hc.bb, hc.b_hat)
    r_dim = hc.r if r_dim is None else int(r_dim)
    return u_stack[:r_dim]


def control_step(
    belief: MixedBelief,
    model: SystemModel,
    noise: NoiseModel,
    cost: CostSpec,
    k: int,
    opts: Optional[SolverOptions] = None,
    steps_remaining: Optional[int] = None,
):
    """One receding-horizon control computation.

    The window length is the configured horizon shortened to the steps that
    remain in the episode. Returns ``(u, diagnostics)``; solver errors
    propagate so the caller can apply its fallback policy.
    """
    window = cost.horizon if steps_remaining is None else min(cost.horizon, int(steps_remaining))
    if window < 1:
        raise ValueError("no steps remain to control")
    hm = build_horizon(model, k, window)
    hc = assemble_cost(hm, cost, belief, noise)
    inst = build_sdp(hc, belief, noise)
    sol = solve_sdp(inst, opts)
    u = recover_control(sol, hc)
    diagnostics = {
        "rho": sol.rho,
        "tau1": sol.tau1,
        "tau2": sol.tau2,
        "iterations": sol.iterations,
        "min_eig_certificate": sol.min_eig_certificate,
        "horizon": window,
    }
    return u, diagnostics
