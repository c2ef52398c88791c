"""Measurement noise, trajectory error metrics and feature-expectation diagnostics."""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.stats import qmc

from app.core.exceptions import DimensionMismatchError, NormalizationError, NotPositiveDefiniteError
from app.models.game import CostParameters, GameDefinition
from app.models.results import (
    DerivativeReport,
    DVariant,
    ErrorReport,
    FeatureMatchingReport,
    NoiseSpec,
    NormalizationReport,
)
from app.models.trajectory import DemonstrationSet, Trajectory
from app.services.game import rollout, trajectory_cost
from app.services.likelihood import CostScope, DemonstrationModel
from app.services.sensitivity import state_sensitivity, step_sensitivities

logger = structlog.get_logger(__name__)


def channel_names(traj: Trajectory) -> List[str]:
    names = [f"x{j + 1}" for j in range(traj.state_dim)]
    for i, m in enumerate(traj.control_dims):
        names.extend(f"u{i + 1}_{c + 1}" for c in range(m))
    return names


def _rms(signal: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.square(signal), axis=0))


def add_noise(traj: Trajectory, spec: NoiseSpec) -> Trajectory:
    """Per-channel i.i.d. Gaussian noise with sigma_j = RMS_j * 10^(-snr/20).

    States are perturbed first, then each player's controls, from one seeded stream.
    """
    if spec.noiseless:
        return traj
    rng = np.random.default_rng(spec.seed)
    factor = 10.0 ** (-spec.snr_db / 20.0)
    states = np.array(traj.states)
    if spec.states:
        states = states + rng.standard_normal(states.shape) * (_rms(states) * factor)
    controls = []
    for u in traj.controls:
        u = np.array(u)
        if spec.controls:
            u = u + rng.standard_normal(u.shape) * (_rms(u) * factor)
        controls.append(u)
    return Trajectory(states=states, controls=tuple(controls))


def nmae(estimated: Trajectory, reference: Trajectory) -> ErrorReport:
    """e_j = max_t |a_hat_j - a_bar_j| / max_t |a_bar_j| per channel; e_x and e_u are the maxima."""
    if estimated.horizon != reference.horizon:
        raise DimensionMismatchError(f"Horizons differ: {estimated.horizon} vs {reference.horizon}")
    if estimated.state_dim != reference.state_dim or estimated.control_dims != reference.control_dims:
        raise DimensionMismatchError("Trajectories have different dimensions")
    names = channel_names(reference)
    est = np.hstack([estimated.states, *estimated.controls])
    ref = np.hstack([reference.states, *reference.controls])
    scale = np.max(np.abs(ref), axis=0)
    for j, s in enumerate(scale):
        if s == 0.0:
            raise NormalizationError(names[j])
    errors = np.max(np.abs(est - ref), axis=0) / scale
    n = reference.state_dim
    channels = {name: float(e) for name, e in zip(names, errors)}
    return ErrorReport(
        e_x=float(np.max(errors[:n])),
        e_u=float(np.max(errors[n:])) if errors.size > n else 0.0,
        channels=channels,
    )


def _antithetic_normals(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    half = rng.standard_normal(((count + 1) // 2, dim))
    return np.vstack([half, -half])[:count]


def feature_matching_report(
    theta: np.ndarray,
    demonstrations: DemonstrationSet,
    game: GameDefinition,
    scope: CostScope,
    sample_count: int = 10_000,
    seed: int = 0,
    variant: DVariant = "plain",
    free: Optional[Sequence[bool]] = None,
) -> FeatureMatchingReport:
    """Compare demonstrated feature counts with their expectation under the fitted density.

    Controls are drawn in antithetic pairs from N(u_E - G^-1 g, G^-1) around each
    demonstration and rolled out; linear dynamics are propagated exactly, and in one
    batch, through the control-to-state map.
    """
    theta = scope.theta_vector(theta)
    free_positions = [True] * scope.dim if free is None else list(free)
    rng = np.random.default_rng(seed)
    demonstrated: List[np.ndarray] = []
    expected: List[np.ndarray] = []
    keys: Tuple[str, ...] = ()
    index = np.zeros(0, dtype=int)
    for traj in demonstrations.trajectories:
        model = DemonstrationModel(traj, game, scope, variant)
        keys, index = model.keys, model.index
        g, G = model.gradient(theta), model.hessian(theta)
        try:
            lower = cholesky(G, lower=True)
        except LinAlgError as e:
            raise NotPositiveDefiniteError("Hessian is not positive definite at the estimate") from e
        mean = -solve_triangular(lower.T, solve_triangular(lower, g, lower=True), lower=False)
        draws = _antithetic_normals(rng, sample_count, model.dim)
        deltas = mean + solve_triangular(lower.T, draws.T, lower=False).T

        representatives = []
        for u in range(len(model.keys)):
            pos = int(np.flatnonzero(model.index == u)[0])
            i, a = scope.features[pos]
            representatives.append(game.features[i][a])
        demonstrated.append(np.array([f.stage_values(traj.joint_stages()).sum() for f in representatives]))

        width = sum(game.control_dims[p] for p in scope.players)
        observed = np.hstack([traj.controls[p] for p in scope.players])
        blocks = observed[None] + deltas.reshape(sample_count, traj.horizon, width)
        if game.dynamics.is_linear:
            s = state_sensitivity(step_sensitivities(traj, game), scope.players, "plain")
            columns = [traj.states[None] + np.einsum("kia,ra->rki", s, deltas, optimize=True)]
            offset = 0
            for p, u in enumerate(traj.controls):
                if p in scope.players:
                    m = game.control_dims[p]
                    columns.append(blocks[:, :, offset:offset + m])
                    offset += m
                else:
                    columns.append(np.broadcast_to(u, (sample_count,) + u.shape))
            stages = np.concatenate(columns, axis=2)
        else:
            stages = np.empty((sample_count, traj.horizon, traj.joint_stages().shape[1]))
            for r in range(sample_count):
                controls = [np.array(u) for u in traj.controls]
                offset = 0
                for p in scope.players:
                    m = game.control_dims[p]
                    controls[p] = blocks[r, :, offset:offset + m]
                    offset += m
                stages[r] = rollout(game, controls, traj.initial_state, traj.horizon).joint_stages()
        expected.append(np.array([f.batch_counts(stages).mean() for f in representatives]))

    demonstrated_mean = np.mean(demonstrated, axis=0)
    expected_mean = np.mean(expected, axis=0)
    mismatch = np.abs(expected_mean - demonstrated_mean) / np.maximum(np.abs(demonstrated_mean), 1e-300)
    free_unique = [any(free_positions[pos] for pos in np.flatnonzero(index == u)) for u in range(len(keys))]
    report = FeatureMatchingReport(
        keys=tuple(keys),
        demonstrated=demonstrated_mean,
        expected=expected_mean,
        relative_mismatch=mismatch,
        free=tuple(free_unique),
        sample_count=sample_count,
    )
    logger.info("Feature matching", max_free_mismatch=report.max_free_mismatch, samples=sample_count)
    return report


def derivative_check(
    traj: Trajectory,
    game: GameDefinition,
    theta: CostParameters,
    player: int,
    draws: int = 20,
    seed: int = 0,
    horizon: Optional[int] = None,
    spread: float = 0.1,
    eps: float = 1e-5,
) -> DerivativeReport:
    """Analytic gradient g of a player's cost against central differences at random controls.

    Every draw perturbs the player's controls around ``traj`` (truncated to ``horizon``
    samples), rebuilds the model there and compares g along a random unit direction.
    With linear dynamics the cost is quadratic in the controls, so the second-order
    model must also reproduce J at a random finite step.
    """
    horizon = min(horizon or traj.horizon, traj.horizon)
    game = game.with_horizon(horizon)
    controls = [np.array(u[:horizon]) for u in traj.controls]
    base = controls[player]
    scale = max(float(np.sqrt(np.mean(np.square(base)))), 1e-3)
    scope = CostScope.player(game, player)
    weights = scope.theta_vector(theta)
    rng = np.random.default_rng(seed)

    def cost(flat: np.ndarray) -> float:
        trial = list(controls)
        trial[player] = flat.reshape(base.shape)
        return trajectory_cost(rollout(game, trial, traj.initial_state, horizon), theta, game, player)

    gradient_errors: List[float] = []
    remainders: List[float] = []
    for _ in range(draws):
        u = base.reshape(-1) + spread * scale * rng.standard_normal(base.size)
        point = list(controls)
        point[player] = u.reshape(base.shape)
        model = DemonstrationModel(rollout(game, point, traj.initial_state, horizon), game, scope, "plain")
        g = model.gradient(weights)
        v = rng.standard_normal(u.size)
        v /= np.linalg.norm(v)
        fd = (cost(u + eps * v) - cost(u - eps * v)) / (2.0 * eps)
        gradient_errors.append(abs(float(g @ v) - fd) / max(float(np.linalg.norm(g)), 1e-300))
        if game.dynamics.is_linear:
            step = spread * scale * rng.standard_normal(u.size)
            here, there = cost(u), cost(u + step)
            predicted = here + float(g @ step) + 0.5 * float(step @ model.hessian(weights) @ step)
            remainders.append(abs(there - predicted) / max(abs(here), abs(there), 1e-300))
    report = DerivativeReport(
        player=player,
        draws=draws,
        gradient_error=max(gradient_errors),
        quadratic_remainder=max(remainders) if remainders else None,
    )
    logger.info(
        "Derivative check",
        game=game.name,
        player=player + 1,
        gradient_error=report.gradient_error,
        quadratic_remainder=report.quadratic_remainder,
    )
    return report


def normalization_check(
    model: DemonstrationModel,
    theta: np.ndarray,
    samples: int = 100_000,
    seed: int = 0,
    width: float = 6.0,
) -> NormalizationReport:
    """Quasi-Monte-Carlo integral of the Gaussian density over a box around its mean.

    The density is anchored at the closed-form value ``model.log_density`` at the
    demonstration, so the integral is one only if that normalization is right.
    ``samples`` is rounded up to a power of two.
    """
    theta = model.scope.theta_vector(theta)
    g, G = model.gradient(theta), model.hessian(theta)
    anchor = model.log_density(theta)
    if not np.isfinite(anchor):
        raise NotPositiveDefiniteError("Hessian is not positive definite at the demonstration")
    mean = -np.linalg.solve(G, g)
    half = width * np.sqrt(np.diag(np.linalg.inv(G)))
    sobol = qmc.Sobol(d=model.dim, scramble=True, seed=seed)
    points = qmc.scale(sobol.random_base2(math.ceil(math.log2(samples))), mean - half, mean + half)
    log_p = anchor - points @ g - 0.5 * np.einsum("ri,ij,rj->r", points, G, points)
    report = NormalizationReport(
        integral=float(np.prod(2.0 * half) * np.mean(np.exp(log_p))),
        samples=len(points),
        dim=model.dim,
    )
    logger.info("Normalization check", integral=report.integral, samples=report.samples, dim=model.dim)
    return report
