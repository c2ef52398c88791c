"""Forward solvers for the discretized games and a unilateral-deviation Nash check."""
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.core.config import Settings, settings as default_settings
from app.core.exceptions import ConfigurationError, DimensionMismatchError, GameError
from app.models.game import CostParameters, Feature, GameDefinition
from app.models.results import FeedbackGains, NashCheckReport, PlayerDeviation, SolverReport
from app.models.trajectory import Trajectory
from app.services.game import rollout
from app.services.lq import solve_feedback_nash_lq, solve_open_loop_nash_lq
from app.services.sensitivity import control_indices, feature_count_model, state_sensitivity, step_sensitivities
from app.systems.closed_loop import closed_loop_dynamics, laws_from_gains, project_trajectory
from app.systems.registry import BenchmarkSystem

logger = structlog.get_logger(__name__)

Concept = Literal["cg", "ol-nash", "fb-nash"]


class WeightedFeatureSum(Feature):
    """sum_f w_f eta_f, so that a cost -theta^T mu is the negated count of one feature."""

    def __init__(self, terms: Sequence[Tuple[float, Feature]], key: str = "cost"):
        self.terms = [(float(w), f) for w, f in terms if w != 0.0]
        self.key = key

    def value(self, k: int, z: np.ndarray) -> float:
        return sum(w * f.value(k, z) for w, f in self.terms)

    def derivatives(self, k: int, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad, hess = np.zeros(z.size), np.zeros((z.size, z.size))
        for w, f in self.terms:
            g, h = f.derivatives(k, z)
            grad += w * g
            hess += w * h
        return grad, hess

    def stage_values(self, stages: np.ndarray) -> np.ndarray:
        out = np.zeros(len(stages))
        for w, f in self.terms:
            out += w * f.stage_values(stages)
        return out

    def stage_derivatives(self, stages: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = stages.shape[1]
        grads, hess = np.zeros((len(stages), d)), np.zeros((len(stages), d, d))
        for w, f in self.terms:
            g, h = f.stage_derivatives(stages)
            grads += w * g
            hess += w * h
        return grads, hess


def player_objective(game: GameDefinition, theta: CostParameters, player: int) -> WeightedFeatureSum:
    t = theta.theta[player]
    if t.size != game.feature_dims[player]:
        raise DimensionMismatchError(f"theta of player {player + 1} has {t.size} entries", player=player + 1)
    return WeightedFeatureSum(list(zip(t, game.features[player])), key=f"J{player + 1}")


def cooperative_objective(game: GameDefinition, theta: CostParameters) -> WeightedFeatureSum:
    terms = []
    for i in range(game.player_count):
        terms.extend(player_objective(game, theta, i).terms)
    return WeightedFeatureSum(terms, key="J_sum")


def objective_value(traj: Trajectory, objective: WeightedFeatureSum) -> float:
    return float(-objective.stage_values(traj.joint_stages()).sum())


def adjoint_gradient(
    traj: Trajectory, game: GameDefinition, objective: WeightedFeatureSum, players: Sequence[int]
) -> np.ndarray:
    """dJ/du for the given players, time-major, by one backward costate sweep.

    lambda(k_E) = dJ/dx(k_E),  lambda(k) = dJ/dx(k) + A_k^T lambda(k+1),
    dJ/du(k) = dJ/du(k)|_stage + B_k^T lambda(k+1).
    """
    n = game.state_dim
    grads, _ = objective.stage_derivatives(traj.joint_stages())
    grads = -grads
    uidx = control_indices(game, players)
    horizon = traj.horizon
    out = np.zeros((horizon, uidx.size))
    out[-1] = grads[-1, uidx]
    lam = grads[-1, :n]
    for k in range(horizon - 2, -1, -1):
        a, bs = game.dynamics.linearize(k, traj.states[k], traj.stage_controls(k))
        b = np.hstack([bs[p] for p in players])
        out[k] = grads[k, uidx] + b.T @ lam
        lam = grads[k, :n] + a.T @ lam
    return out.reshape(-1)


def gauss_newton_hessian(
    traj: Trajectory, game: GameDefinition, objective: WeightedFeatureSum, players: Sequence[int]
) -> np.ndarray:
    s = state_sensitivity(step_sensitivities(traj, game), players, "plain")
    _, hess = feature_count_model(traj.joint_stages(), objective, game, players, s)
    return -hess


def _damped_solve(h: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    shift = 0.0
    scale = max(1.0, float(np.max(np.abs(np.diag(h)))))
    for _ in range(30):
        try:
            factor = cho_factor(h + shift * np.eye(h.shape[0]), lower=True)
            return cho_solve(factor, rhs)
        except LinAlgError:
            shift = max(1e-10 * scale, 10.0 * shift)
    return rhs


def _stationary(grad: np.ndarray, value: float, tol: float) -> bool:
    return float(np.max(np.abs(grad), initial=0.0)) <= tol * max(1.0, abs(value))


def _replace_controls(traj: Trajectory, game: GameDefinition, players: Sequence[int], flat: np.ndarray) -> List[np.ndarray]:
    block = flat.reshape(traj.horizon, -1)
    controls = [np.array(u) for u in traj.controls]
    offset = 0
    for p in players:
        m = game.control_dims[p]
        controls[p] = block[:, offset:offset + m]
        offset += m
    return controls


def _scope_controls(traj: Trajectory, players: Sequence[int]) -> np.ndarray:
    return np.hstack([traj.controls[p] for p in players]).reshape(-1)


class ForwardSolverService:
    """Synthesizes demonstrations and certifies Nash equilibria."""

    def __init__(self, config: Optional[Settings] = None):
        self.config = config or default_settings

    def minimize(
        self,
        game: GameDefinition,
        traj: Trajectory,
        players: Sequence[int],
        objective: WeightedFeatureSum,
        max_iterations: Optional[int] = None,
    ) -> Tuple[Trajectory, SolverReport]:
        """Gauss-Newton descent on the given players' controls with the others held fixed."""
        tol = self.config.tol_opt
        max_iterations = max_iterations or self.config.max_solver_iterations
        x1 = traj.initial_state
        value = objective_value(traj, objective)
        grad = adjoint_gradient(traj, game, objective, players)
        iterations = 0
        while iterations < max_iterations and not _stationary(grad, value, tol):
            h = gauss_newton_hessian(traj, game, objective, players)
            step = -_damped_solve(h, grad)
            slope = float(grad @ step)
            if slope >= 0:
                step, slope = -grad, -float(grad @ grad)
            u = _scope_controls(traj, players)
            alpha, accepted = 1.0, None
            for _ in range(40):
                try:
                    trial = rollout(game, _replace_controls(traj, game, players, u + alpha * step), x1, traj.horizon)
                except GameError:
                    trial = None
                if trial is not None:
                    trial_value = objective_value(trial, objective)
                    if trial_value <= value + 1e-4 * alpha * slope + 1e-15 * max(1.0, abs(value)):
                        accepted = trial
                        break
                alpha *= 0.5
            if accepted is None:
                break
            traj = accepted
            value = objective_value(traj, objective)
            grad = adjoint_gradient(traj, game, objective, players)
            iterations += 1
        residual = float(np.max(np.abs(grad), initial=0.0))
        return traj, SolverReport(
            converged=_stationary(grad, value, tol),
            iterations=iterations,
            residual=residual,
            objective=value,
            tolerance=tol * max(1.0, abs(value)),
        )

    def _initial(self, game: GameDefinition, x1: np.ndarray) -> Trajectory:
        zeros = [np.zeros((game.horizon, m)) for m in game.control_dims]
        return rollout(game, zeros, x1)

    def solve_cooperative(
        self, game: GameDefinition, theta: CostParameters, x1: np.ndarray
    ) -> Tuple[Trajectory, SolverReport]:
        """Minimize J_Sigma = sum_i J_i over all controls."""
        objective = cooperative_objective(game, theta)
        traj, report = self.minimize(game, self._initial(game, x1), tuple(range(game.player_count)), objective)
        logger.info(
            "Cooperative solve finished",
            game=game.name,
            converged=report.converged,
            iterations=report.iterations,
            residual=report.residual,
        )
        return traj, report

    def _nash_residual(self, traj: Trajectory, game: GameDefinition, theta: CostParameters) -> Tuple[np.ndarray, bool]:
        """Stacked per-player gradients dJ_i/du_i in joint time-major order, and whether all are stationary."""
        m = sum(game.control_dims)
        residual = np.zeros((traj.horizon, m))
        ok = True
        offset = 0
        for i in range(game.player_count):
            objective = player_objective(game, theta, i)
            g = adjoint_gradient(traj, game, objective, (i,))
            mi = game.control_dims[i]
            residual[:, offset:offset + mi] = g.reshape(traj.horizon, mi)
            ok = ok and _stationary(g, objective_value(traj, objective), self.config.tol_opt)
            offset += mi
        return residual.reshape(-1), ok

    def _nash_jacobian(self, traj: Trajectory, game: GameDefinition, theta: CostParameters) -> np.ndarray:
        players = tuple(range(game.player_count))
        m = sum(game.control_dims)
        rows = np.zeros((traj.horizon * m, traj.horizon * m))
        offset = 0
        for i in players:
            h = gauss_newton_hessian(traj, game, player_objective(game, theta, i), players)
            mi = game.control_dims[i]
            idx = (np.arange(traj.horizon)[:, None] * m + offset + np.arange(mi)[None, :]).reshape(-1)
            rows[idx] = h[idx]
            offset += mi
        return rows

    def solve_open_loop_nash(
        self,
        game: GameDefinition,
        theta: CostParameters,
        x1: np.ndarray,
        initial: Optional[Trajectory] = None,
    ) -> Tuple[Trajectory, SolverReport]:
        """Iterated best response from the cooperative solution, then Newton on the stacked conditions."""
        if initial is None:
            initial, _ = self.solve_cooperative(game, theta, x1)
        traj = initial
        players = tuple(range(game.player_count))
        residual, ok = self._nash_residual(traj, game, theta)
        sweeps = 0
        while not ok and sweeps < self.config.nash_sweeps:
            for i in players:
                traj, _ = self.minimize(game, traj, (i,), player_objective(game, theta, i))
            residual, ok = self._nash_residual(traj, game, theta)
            sweeps += 1
            logger.debug("Best-response sweep", sweep=sweeps, residual=float(np.max(np.abs(residual))))

        newton = 0
        while not ok and newton < self.config.max_solver_iterations:
            jac = self._nash_jacobian(traj, game, theta)
            step = np.linalg.lstsq(jac, -residual, rcond=None)[0]
            norm = float(np.linalg.norm(residual))
            u = _scope_controls(traj, players)
            alpha, accepted = 1.0, None
            for _ in range(40):
                try:
                    trial = rollout(game, _replace_controls(traj, game, players, u + alpha * step), x1, traj.horizon)
                    trial_residual, trial_ok = self._nash_residual(trial, game, theta)
                except GameError:
                    trial = None
                if trial is not None and (trial_ok or np.linalg.norm(trial_residual) <= (1.0 - 1e-4 * alpha) * norm):
                    accepted = trial
                    break
                alpha *= 0.5
            if accepted is None:
                break
            traj, residual, ok = accepted, trial_residual, trial_ok
            newton += 1

        final = float(np.max(np.abs(residual), initial=0.0))
        logger.info(
            "Open-loop Nash solve finished",
            game=game.name,
            converged=ok,
            sweeps=sweeps,
            newton_steps=newton,
            residual=final,
        )
        return traj, SolverReport(
            converged=ok,
            iterations=sweeps + newton,
            residual=final,
            tolerance=self.config.tol_opt,
            diagnostics={"sweeps": float(sweeps), "newton_steps": float(newton)},
        )

    def check_nash(
        self,
        traj: Trajectory,
        game: GameDefinition,
        theta: CostParameters,
        concept: Literal["open-loop", "feedback"] = "open-loop",
        gains: Optional[FeedbackGains] = None,
        tol: float = 1e-6,
    ) -> NashCheckReport:
        """Re-optimize each player's cost against the others' fixed controls or feedback laws."""
        if concept == "feedback" and gains is None:
            raise ConfigurationError("Feedback Nash check needs the players' gains")
        if concept == "feedback" and gains is not None and gains.stationary:
            logger.warning("Stationary gains only approximate the finite-horizon feedback equilibrium")
        deviations = []
        for i in range(game.player_count):
            if concept == "open-loop":
                sub_game, sub_traj, players = game, traj, (i,)
                objective = player_objective(game, theta, i)
            else:
                sub_game = closed_loop_dynamics(game, laws_from_gains(gains, exclude=i), i)
                sub_traj = project_trajectory(traj, i)
                players = (0,)
                objective = WeightedFeatureSum(list(zip(theta.theta[i], sub_game.features[0])), key=f"J{i + 1}")
            cost = objective_value(sub_traj, objective)
            best, report = self.minimize(sub_game, sub_traj, players, objective)
            best_cost = objective_value(best, objective)
            improvement = max(0.0, cost - best_cost)
            deviations.append(
                PlayerDeviation(
                    player=i,
                    cost=cost,
                    best_response_cost=best_cost,
                    improvement=improvement,
                    certified=improvement <= tol * (1.0 + abs(cost)),
                    inner_converged=report.converged,
                )
            )
        result = NashCheckReport(concept=concept, tolerance=tol, players=tuple(deviations))
        logger.info("Nash check", concept=concept, is_nash=result.is_nash, improvements=[d.improvement for d in deviations])
        return result

    def check_feedback_nash(
        self,
        system: BenchmarkSystem,
        theta: Optional[CostParameters] = None,
        x1: Optional[np.ndarray] = None,
        tol: float = 1e-6,
    ) -> Tuple[Trajectory, FeedbackGains, NashCheckReport]:
        """Certify the finite-horizon feedback equilibrium under its time-varying gains."""
        if system.linear is None:
            raise ConfigurationError(
                f"Feedback Nash certification needs a linear-quadratic game; '{system.game.name}' is not"
            )
        theta = system.theta if theta is None else theta
        x1 = system.x1 if x1 is None else np.asarray(x1, dtype=float)
        gains, traj, _ = solve_feedback_nash_lq(system.linear, theta, x1, system.game.horizon, stationary=False)
        return traj, gains, self.check_nash(traj, system.game, theta, "feedback", gains, tol)

    def solve(
        self,
        system: BenchmarkSystem,
        concept: Concept,
        theta: Optional[CostParameters] = None,
        x1: Optional[np.ndarray] = None,
        stationary: bool = True,
    ) -> Tuple[Trajectory, SolverReport, Optional[FeedbackGains]]:
        """Dispatch on the solution concept; LQ systems use the closed-form recursions."""
        theta = system.theta if theta is None else theta
        x1 = system.x1 if x1 is None else np.asarray(x1, dtype=float)
        game = system.game
        if concept == "cg":
            traj, report = self.solve_cooperative(game, theta, x1)
            return traj, report, None
        if concept == "ol-nash":
            if system.linear is not None:
                traj, report = solve_open_loop_nash_lq(system.linear, theta, x1, game.horizon)
            else:
                traj, report = self.solve_open_loop_nash(game, theta, x1)
            return traj, report, None
        if concept == "fb-nash":
            if system.linear is None:
                raise ConfigurationError(
                    "Feedback Nash synthesis is only available for linear-quadratic games; "
                    f"'{game.name}' is nonlinear"
                )
            gains, traj, report = solve_feedback_nash_lq(
                system.linear,
                theta,
                x1,
                game.horizon,
                stationary=stationary,
                tol=self.config.riccati_tol,
                max_steps=self.config.riccati_max_steps,
            )
            return traj, report, gains
        raise ConfigurationError(f"Unknown concept '{concept}'. Use cg, ol-nash or fb-nash")
