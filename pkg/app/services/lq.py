"""Closed-form solvers for linear-quadratic games.

Player i's cost is sum_k x^T Q_i x + u_i^T R_i u_i with Q_i = diag(theta_i[:n]) and
R_i = diag(theta_i[n:]), the negated-square features of the benchmark games.
"""
from typing import List, Sequence, Tuple

import numpy as np
import structlog

from app.core.exceptions import ConfigurationError, SingularRecursionError, SolverError
from app.models.game import CostParameters
from app.models.results import FeedbackGains, SolverReport
from app.models.trajectory import Trajectory
from app.systems.linear import LinearGameMatrices

logger = structlog.get_logger(__name__)


def lq_weights(theta: CostParameters, state_dim: int, control_dims: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(Q_i, R_i) per player; R_i must be positive definite."""
    out = []
    for i, (t, m) in enumerate(zip(theta.theta, control_dims)):
        if t.size != state_dim + m:
            raise ConfigurationError(f"theta of player {i + 1} must have {state_dim + m} entries")
        r = np.diag(t[state_dim:])
        if np.any(np.diag(r) <= 0):
            raise ConfigurationError(f"Own-control weights of player {i + 1} must be positive")
        out.append((np.diag(t[:state_dim]), r))
    return out


def solve_open_loop_nash_lq(
    lin: LinearGameMatrices,
    theta: CostParameters,
    x1: np.ndarray,
    horizon: int,
) -> Tuple[Trajectory, SolverReport]:
    """Finite-horizon open-loop Nash equilibrium from the coupled backward recursion.

    M_i(k_E) = Q_i,  Lambda_k = I + sum_j B_j R_j^-1 B_j^T M_j(k+1),
    M_i(k) = Q_i + A^T M_i(k+1) Lambda_k^-1 A,
    x(k+1) = Lambda_k^-1 A x(k),  u_i(k) = -R_i^-1 B_i^T M_i(k+1) x(k+1).
    The last controls only enter the cost and are zero.
    """
    a, bs = lin.require_discrete()
    n = lin.state_dim
    weights = lq_weights(theta, n, lin.control_dims)
    r_inv = [np.linalg.inv(r) for _, r in weights]
    m_next = [q.copy() for q, _ in weights]
    lambdas: List[np.ndarray] = [np.eye(n)] * (horizon - 1)
    ms: List[List[np.ndarray]] = [[] for _ in bs]
    for k in range(horizon - 2, -1, -1):
        lam = np.eye(n) + sum(b @ ri @ b.T @ m for b, ri, m in zip(bs, r_inv, m_next))
        try:
            lam_inv_a = np.linalg.solve(lam, a)
        except np.linalg.LinAlgError as e:
            raise SingularRecursionError(step=k + 1) from e
        if np.linalg.cond(lam) > 1e14:
            raise SingularRecursionError(step=k + 1)
        lambdas[k] = lam
        for i in range(len(bs)):
            ms[i].append(m_next[i])
        m_next = [q + a.T @ m @ lam_inv_a for (q, _), m in zip(weights, m_next)]
    for i in range(len(bs)):
        ms[i].reverse()

    states = np.zeros((horizon, n))
    controls = [np.zeros((horizon, b.shape[1])) for b in bs]
    states[0] = np.asarray(x1, dtype=float)
    for k in range(horizon - 1):
        states[k + 1] = np.linalg.solve(lambdas[k], a @ states[k])
        for i, (b, ri) in enumerate(zip(bs, r_inv)):
            controls[i][k] = -ri @ b.T @ ms[i][k] @ states[k + 1]
    traj = Trajectory(states=states, controls=tuple(controls))
    logger.info("Solved open-loop LQ game", horizon=horizon, players=len(bs))
    return traj, SolverReport(converged=True, iterations=horizon - 1, residual=0.0, tolerance=0.0)


def _coupled_gains(a, bs, weights, zs) -> List[np.ndarray]:
    """Solve the stacked system S [P_1; ...; P_N] = [B_1^T Z_1 A; ...; B_N^T Z_N A]."""
    rows = []
    for i, (bi, (_, ri), zi) in enumerate(zip(bs, weights, zs)):
        rows.append(np.hstack([ri + bi.T @ zi @ bi if j == i else bi.T @ zi @ bj for j, bj in enumerate(bs)]))
    s = np.vstack(rows)
    y = np.vstack([bi.T @ zi @ a for bi, zi in zip(bs, zs)])
    p = np.linalg.solve(s, y)
    splits = np.cumsum([b.shape[1] for b in bs])[:-1]
    return np.split(p, splits, axis=0)


def _riccati_step(a, bs, weights, zs) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    ps = _coupled_gains(a, bs, weights, zs)
    f = a - sum(b @ p for b, p in zip(bs, ps))
    zs_new = [q + p.T @ r @ p + f.T @ z @ f for (q, r), p, z in zip(weights, ps, zs)]
    return ps, zs_new


def solve_feedback_nash_lq(
    lin: LinearGameMatrices,
    theta: CostParameters,
    x1: np.ndarray,
    horizon: int,
    stationary: bool = True,
    tol: float = 1e-10,
    max_steps: int = 10_000,
) -> Tuple[FeedbackGains, Trajectory, SolverReport]:
    """Feedback Nash gains u_i = K_i x from the coupled Riccati recursion.

    ``stationary`` iterates the recursion backwards until the gains change by at
    most ``tol`` and rolls out with the constant gains at every sample. Otherwise
    the time-varying finite-horizon gains are returned with a zero last gain.
    """
    a, bs = lin.require_discrete()
    n = lin.state_dim
    weights = lq_weights(theta, n, lin.control_dims)
    zs = [q.copy() for q, _ in weights]

    if stationary:
        ps = [np.zeros((b.shape[1], n)) for b in bs]
        residuals: List[float] = []
        for step in range(1, max_steps + 1):
            try:
                ps_new, zs = _riccati_step(a, bs, weights, zs)
            except np.linalg.LinAlgError as e:
                raise SingularRecursionError(step=step) from e
            change = max(float(np.max(np.abs(p1 - p0))) for p1, p0 in zip(ps_new, ps))
            ps = ps_new
            residuals.append(change)
            if not np.isfinite(change):
                raise SolverError("Coupled Riccati iteration diverged", residuals[-20:])
            if change <= tol:
                break
        else:
            raise SolverError(f"Coupled Riccati iteration did not converge in {max_steps} steps", residuals[-20:])
        gains = FeedbackGains(gains=tuple(-p for p in ps))
        closed = a + sum(b @ k for b, k in zip(bs, gains.gains))
        radius = float(np.max(np.abs(np.linalg.eigvals(closed))))
        if radius >= 1.0:
            raise SolverError(f"Feedback Nash closed loop is not stable (spectral radius {radius:.6f})", residuals[-20:])
        report = SolverReport(
            converged=True,
            iterations=len(residuals),
            residual=residuals[-1],
            tolerance=tol,
            diagnostics={"spectral_radius": radius},
        )
    else:
        stacked = [np.zeros((horizon, b.shape[1], n)) for b in bs]
        for k in range(horizon - 2, -1, -1):
            try:
                ps, zs = _riccati_step(a, bs, weights, zs)
            except np.linalg.LinAlgError as e:
                raise SingularRecursionError(step=k + 1) from e
            for i, p in enumerate(ps):
                stacked[i][k] = -p
        gains = FeedbackGains(gains=tuple(stacked))
        report = SolverReport(converged=True, iterations=horizon - 1, residual=0.0, tolerance=0.0)

    traj = rollout_linear_feedback(lin, gains, x1, horizon)
    logger.info("Solved feedback LQ game", stationary=stationary, iterations=report.iterations)
    return gains, traj, report


def rollout_linear_feedback(
    lin: LinearGameMatrices, gains: FeedbackGains, x1: np.ndarray, horizon: int
) -> Trajectory:
    a, bs = lin.require_discrete()
    states = np.zeros((horizon, lin.state_dim))
    controls = [np.zeros((horizon, b.shape[1])) for b in bs]
    states[0] = np.asarray(x1, dtype=float)
    for k in range(horizon):
        for i in range(len(bs)):
            controls[i][k] = gains.gain(i, k) @ states[k]
        if k + 1 < horizon:
            states[k + 1] = a @ states[k] + sum(b @ u[k] for b, u in zip(bs, controls))
    return Trajectory(states=states, controls=tuple(controls))
