"""Gaussian approximation of the maximum-entropy trajectory density.

Around a demonstration the scope's cost is replaced by its second-order model
J(u_E + d) ~ J(u_E) + g^T d + 1/2 d^T G d, so

    ln p(u_E | x^(1), theta) = -1/2 g^T G^-1 g + 1/2 ln det G - d/2 ln 2 pi.

g and G are linear in theta, so each demonstration caches one gradient and one
Hessian per distinct feature and only assembles and factorizes G(theta).
"""
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import model_validator
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.core.exceptions import DimensionMismatchError
from app.models.base import Array, FrozenModel
from app.models.game import CostParameters, GameDefinition
from app.models.results import ControlJacobian, DVariant, QuadraticLikelihoodModel, Scope
from app.models.trajectory import DemonstrationSet, Trajectory
from app.services.game import build_demonstration_set, check_dimensions
from app.services.sensitivity import feature_count_models, sensitivity_from_jacobian, state_sensitivity, step_sensitivities

logger = structlog.get_logger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class CostScope(FrozenModel):
    """Whose controls are integrated out and which weights enter the cost.

    ``features`` lists (player, feature index) in the order of the parameter
    vector: theta_Sigma for the joint scope, theta_i for a single player.
    """

    kind: Scope
    players: Tuple[int, ...]
    features: Tuple[Tuple[int, int], ...]

    @model_validator(mode="after")
    def non_empty(self):
        if not self.players or not self.features:
            raise ValueError("Scope needs players and features")
        return self

    @classmethod
    def joint(cls, game: GameDefinition) -> "CostScope":
        return cls(
            kind="joint",
            players=tuple(range(game.player_count)),
            features=tuple((i, a) for i, fs in enumerate(game.features) for a in range(len(fs))),
        )

    @classmethod
    def player(cls, game: GameDefinition, player: int) -> "CostScope":
        if not 0 <= player < game.player_count:
            raise DimensionMismatchError(f"Player {player + 1} does not exist", player=player + 1)
        return cls(kind="player", players=(player,), features=tuple((player, a) for a in range(game.feature_dims[player])))

    @property
    def dim(self) -> int:
        return len(self.features)

    def theta_vector(self, theta: Union[CostParameters, np.ndarray]) -> np.ndarray:
        if isinstance(theta, CostParameters):
            return np.array([theta.theta[i][a] for i, a in self.features])
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionMismatchError(f"Scope expects {self.dim} parameters, got {theta.shape}")
        return theta


def gaussian_log_density(
    g: np.ndarray, G: np.ndarray, condition_limit: float = 1e12
) -> Tuple[float, float, Tuple[str, ...]]:
    """(ln density, condition estimate, warnings); -inf when G is not positive definite."""
    d = g.size
    try:
        factor = cho_factor(G, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        return -math.inf, math.inf, ("hessian not positive definite",)
    diag = np.abs(np.diag(factor[0]))
    condition = float((diag.max() / diag.min()) ** 2) if diag.min() > 0 else math.inf
    warnings: Tuple[str, ...] = ()
    if condition > condition_limit:
        warnings = (f"ill-conditioned hessian (condition estimate {condition:.3e})",)
    a = cho_solve(factor, g)
    value = -0.5 * float(g @ a) + float(np.sum(np.log(diag))) - 0.5 * d * LOG_2PI
    return value, condition, warnings


def _model_from_jacobian(traj, game, scope, d):
    horizon = traj.horizon
    s = sensitivity_from_jacobian(d, horizon, game.state_dim)
    if tuple(d.players) != scope.players:
        raise DimensionMismatchError("Control Jacobian was built for a different scope")
    features = [game.features[i][a] for i, a in scope.features]
    return feature_count_models(traj, game, features, scope.players, s)


def cost_gradient_g(
    traj: Trajectory, theta, game: GameDefinition, scope: CostScope, d: ControlJacobian
) -> np.ndarray:
    """Total derivative of the scope's cost w.r.t. its stacked controls."""
    grads, _ = _model_from_jacobian(traj, game, scope, d)
    return -(scope.theta_vector(theta) @ grads)


def cost_hessian_G(
    traj: Trajectory, theta, game: GameDefinition, scope: CostScope, d: ControlJacobian
) -> np.ndarray:
    """Gauss-Newton Hessian of the scope's cost (second-order state sensitivities dropped)."""
    _, hessians = _model_from_jacobian(traj, game, scope, d)
    G = -np.tensordot(scope.theta_vector(theta), hessians, axes=1)
    return 0.5 * (G + G.T)


class DemonstrationModel:
    """Cached per-feature quadratic models of one demonstration for one scope."""

    def __init__(
        self,
        traj: Trajectory,
        game: GameDefinition,
        scope: CostScope,
        variant: DVariant = "plain",
        condition_limit: float = 1e12,
    ):
        check_dimensions(traj, game)
        self.scope = scope
        self.variant = variant
        self.condition_limit = condition_limit
        keys: List[str] = []
        self.index = np.empty(scope.dim, dtype=int)
        unique = []
        for pos, (i, a) in enumerate(scope.features):
            feature = game.features[i][a]
            if feature.key not in keys:
                keys.append(feature.key)
                unique.append(feature)
            self.index[pos] = keys.index(feature.key)
        self.keys = tuple(keys)
        sens = step_sensitivities(traj, game)
        s = state_sensitivity(sens, scope.players, variant)
        self.gradients, self.hessians = feature_count_models(traj, game, unique, scope.players, s)
        self.dim = self.gradients.shape[1]

    def _weights(self, theta: np.ndarray) -> np.ndarray:
        return np.bincount(self.index, weights=theta, minlength=len(self.keys))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return -(self._weights(theta) @ self.gradients)

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        G = -np.tensordot(self._weights(theta), self.hessians, axes=1)
        return 0.5 * (G + G.T)

    def evaluate(self, theta: np.ndarray) -> QuadraticLikelihoodModel:
        theta = self.scope.theta_vector(theta)
        g, G = self.gradient(theta), self.hessian(theta)
        value, condition, warnings = gaussian_log_density(g, G, self.condition_limit)
        for w in warnings:
            logger.warning("Likelihood model warning", scope=self.scope.kind, warning=w)
        return QuadraticLikelihoodModel(
            scope=self.scope.kind,
            players=self.scope.players,
            gradient=g,
            hessian=G,
            log_density=value,
            condition=condition,
            warnings=warnings,
        )

    def log_density(self, theta: np.ndarray) -> float:
        theta = self.scope.theta_vector(theta)
        return gaussian_log_density(self.gradient(theta), self.hessian(theta), self.condition_limit)[0]

    def _factor(self, theta: np.ndarray):
        theta = self.scope.theta_vector(theta)
        g, G = self.gradient(theta), self.hessian(theta)
        try:
            factor = cho_factor(G, lower=True)
        except (LinAlgError, ValueError):
            return None
        return g, factor, float(2.0 * np.sum(np.log(np.abs(np.diag(factor[0])))))

    def derivatives(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """Log-density and its exact gradient w.r.t. theta.

        With a = G^-1 g:
            d phi / d theta_f = -dg_f^T a + 1/2 a^T dG_f a + 1/2 tr(G^-1 dG_f)
        """
        parts = self.scale_terms(theta)
        if parts is None:
            return -math.inf, np.full(self.scope.dim, np.nan)
        q, logdet, dq, dlogdet = parts
        value = -0.5 * q + 0.5 * logdet - 0.5 * self.dim * LOG_2PI
        return value, -0.5 * dq + 0.5 * dlogdet

    def scale_terms(self, theta: np.ndarray) -> Optional[Tuple[float, float, np.ndarray, np.ndarray]]:
        """(q, ln det G, dq/dtheta, d ln det G/dtheta) with q = g^T G^-1 g; None unless G is PD."""
        factored = self._factor(theta)
        if factored is None:
            return None
        g, factor, logdet = factored
        a = cho_solve(factor, g)
        inverse = cho_solve(factor, np.eye(self.dim))
        dg = -self.gradients
        dG = -self.hessians
        u = len(self.keys)
        dq_u = np.array([2.0 * dg[f] @ a - a @ dG[f] @ a for f in range(u)])
        dlogdet_u = np.array([np.sum(inverse * dG[f]) for f in range(u)])
        return float(g @ a), logdet, dq_u[self.index], dlogdet_u[self.index]

    def gradient_map(self) -> np.ndarray:
        """M with g(theta) = M theta; column j belongs to scope feature j."""
        return -self.gradients[self.index].T


class ScaleProfile(FrozenModel):
    """Log-likelihood with the overall cost scale c maximized out.

    With Q = sum_l q_l and D = sum_l d_l, ln L(c theta) peaks at c = D / Q, so
    maximizing the profile is minimizing R = Q exp(-L / D), L = sum_l ln det G_l.
    """

    objective: float
    gradient: Array
    rationality: Optional[float] = None


class LogLikelihood:
    """Sum of per-demonstration log-densities for one scope."""

    def __init__(
        self,
        demonstrations: DemonstrationSet,
        game: GameDefinition,
        scope: CostScope,
        variant: DVariant = "plain",
        condition_limit: float = 1e12,
    ):
        self.scope = scope
        self.models = [DemonstrationModel(t, game, scope, variant, condition_limit) for t in demonstrations.trajectories]

    def __call__(self, theta: np.ndarray) -> float:
        total = 0.0
        for model in self.models:
            value = model.log_density(theta)
            if value == -math.inf:
                return -math.inf
            total += value
        return total

    @property
    def dim(self) -> int:
        return sum(model.dim for model in self.models)

    def derivatives(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        total, grad = 0.0, np.zeros(self.scope.dim)
        for model in self.models:
            value, g = model.derivatives(theta)
            if value == -math.inf:
                return -math.inf, np.full(self.scope.dim, np.nan)
            total += value
            grad += g
        return total, grad

    def profile(self, theta: np.ndarray) -> Optional[ScaleProfile]:
        """Scale-profiled objective; None where some G is not positive definite."""
        q, logdet = 0.0, 0.0
        dq, dlogdet = np.zeros(self.scope.dim), np.zeros(self.scope.dim)
        for model in self.models:
            parts = model.scale_terms(theta)
            if parts is None:
                return None
            q += parts[0]
            logdet += parts[1]
            dq += parts[2]
            dlogdet += parts[3]
        d = self.dim
        weight = math.exp(-logdet / d)
        return ScaleProfile(
            objective=q * weight,
            gradient=weight * (dq - q * dlogdet / d),
            rationality=d / q if q > 0.0 else None,
        )

    def gradient_map(self) -> np.ndarray:
        """Stacked g over all demonstrations as a linear map of theta."""
        return np.vstack([model.gradient_map() for model in self.models])

    def central_gradient(self, theta: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        grad = np.empty(theta.size)
        for f in range(theta.size):
            h = rel_step * max(1.0, abs(theta[f]))
            e = np.zeros(theta.size)
            e[f] = h
            grad[f] = (self(theta + e) - self(theta - e)) / (2.0 * h)
        return grad


def log_density_approx(
    traj: Trajectory,
    theta,
    game: GameDefinition,
    scope: CostScope,
    variant: DVariant = "plain",
    condition_limit: float = 1e12,
) -> float:
    return DemonstrationModel(traj, game, scope, variant, condition_limit).log_density(scope.theta_vector(theta))


def log_likelihood(
    demonstrations: DemonstrationSet,
    theta,
    game: GameDefinition,
    scope: CostScope,
    variant: DVariant = "plain",
) -> float:
    return LogLikelihood(demonstrations, game, scope, variant)(scope.theta_vector(theta))


def as_demonstrations(trajectories: Union[Trajectory, Sequence[Trajectory], DemonstrationSet], game: GameDefinition) -> DemonstrationSet:
    if isinstance(trajectories, DemonstrationSet):
        return trajectories
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    return build_demonstration_set(list(trajectories), game)
