"""Maximum-likelihood identification of cost weights for the three solution concepts."""
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from app.core.config import Settings, settings as default_settings
from app.core.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    NotPositiveDefiniteError,
    RankDeficiencyError,
)
from app.models.game import FixedWeight, GameDefinition
from app.models.results import ConceptTag, DVariant, FeedbackGains, IdentificationResult, OptimizerTrace
from app.models.trajectory import DemonstrationSet, Trajectory
from app.services.game import build_demonstration_set, is_feasible
from app.services.likelihood import CostScope, LogLikelihood
from app.services.optimizer import minimize_bounded
from app.systems.closed_loop import FeedbackLaw, closed_loop_dynamics, laws_from_gains, project_trajectory

logger = structlog.get_logger(__name__)

Demonstrations = Union[DemonstrationSet, Sequence[Trajectory]]


def split_parameters(theta_sigma: np.ndarray, game: GameDefinition) -> Tuple[np.ndarray, ...]:
    """Inverse of stacking: theta_Sigma -> (theta_1, ..., theta_N)."""
    theta_sigma = np.asarray(theta_sigma, dtype=float)
    if theta_sigma.shape != (sum(game.feature_dims),):
        raise DimensionMismatchError(
            f"Stacked vector has {theta_sigma.size} entries, game has {sum(game.feature_dims)} features"
        )
    return tuple(np.split(theta_sigma, np.cumsum(game.feature_dims)[:-1]))


def default_fixed_weights(game: GameDefinition, players: Sequence[int], value: float = 1.0) -> Tuple[FixedWeight, ...]:
    """Own-control-effort weight (first feature after the state features) of every player."""
    return tuple(
        FixedWeight(player=p, index=game.state_dim if game.feature_dims[p] > game.state_dim else 0, value=value)
        for p in players
    )


def estimate_feedback_gains(demonstrations: Demonstrations) -> FeedbackGains:
    """Least-squares K_i minimizing sum_k ||u_i(k) - K_i x(k)||^2 over all demonstrations."""
    trajs = demonstrations.trajectories if isinstance(demonstrations, DemonstrationSet) else tuple(demonstrations)
    states = np.vstack([t.states for t in trajs])
    n = states.shape[1]
    rank = int(np.linalg.matrix_rank(states))
    if rank < n:
        raise RankDeficiencyError(rank=rank, dimension=n)
    gains = []
    for i in range(len(trajs[0].controls)):
        targets = np.vstack([t.controls[i] for t in trajs])
        solution, *_ = np.linalg.lstsq(states, targets, rcond=None)
        gains.append(solution.T)
    logger.info("Estimated feedback gains", samples=states.shape[0], players=len(gains))
    return FeedbackGains(gains=tuple(gains))


class IdentificationService:
    """Wraps the likelihood and the optimizer for each scope."""

    def __init__(self, config: Optional[Settings] = None):
        self.config = config or default_settings

    def _warn_infeasible(self, trajectories: Sequence[Trajectory], game: GameDefinition) -> None:
        # Noisy demonstrations are used as measured.
        bad = [n for n, t in enumerate(trajectories) if not is_feasible(t, game, self.config.feasibility_tol)]
        if bad:
            logger.warning("Demonstrations do not satisfy the dynamics", demonstrations=bad, game=game.name)

    def _demonstrations(self, demonstrations: Demonstrations, game: GameDefinition) -> DemonstrationSet:
        if not isinstance(demonstrations, DemonstrationSet):
            demonstrations = build_demonstration_set(list(demonstrations), game)
        self._warn_infeasible(demonstrations.trajectories, game)
        return demonstrations

    def _fixed_positions(self, scope: CostScope, fixed: Sequence[FixedWeight]) -> Dict[int, float]:
        positions: Dict[int, float] = {}
        for fw in fixed:
            if (fw.player, fw.index) not in scope.features:
                if fw.player in scope.players:
                    raise ConfigurationError(f"Fixed weight index {fw.index + 1} does not exist for player {fw.player + 1}")
                continue
            positions[scope.features.index((fw.player, fw.index))] = fw.value
        for p in scope.players:
            if not any(scope.features[pos][0] == p for pos in positions):
                raise ConfigurationError(f"Player {p + 1} needs a fixed weight to remove the scale ambiguity")
        return positions

    def _initial(self, likelihood: LogLikelihood, free: np.ndarray, base: np.ndarray) -> np.ndarray:
        """Least-squares zero of the stacked gradient g(theta) = M theta over the free weights."""
        m = likelihood.gradient_map()
        held = np.setdiff1d(np.arange(base.size), free)
        rhs = -(m[:, held] @ base[held])
        x, *_ = np.linalg.lstsq(m[:, free], rhs, rcond=None)
        return np.maximum(x, 0.0)

    def _maximize(
        self,
        likelihood: LogLikelihood,
        scope: CostScope,
        fixed: Dict[int, float],
    ) -> Tuple[np.ndarray, bool, OptimizerTrace]:
        """Free weights (bounded below by zero) maximizing the likelihood.

        ``mle_scale="profile"`` also maximizes over the overall cost scale, of which
        the fixed weights only set the reported units; ``"fixed"`` takes the scale
        from the fixed weights as given.
        """
        free = np.array([pos for pos in range(scope.dim) if pos not in fixed], dtype=int)
        base = np.ones(scope.dim)
        for pos, value in fixed.items():
            base[pos] = value

        def full(x: np.ndarray) -> np.ndarray:
            theta = base.copy()
            theta[free] = x
            return theta

        profiled = self.config.mle_scale == "profile"
        central = self.config.mle_gradient == "central"

        def objective(x: np.ndarray):
            theta = full(x)
            if profiled:
                profile = likelihood.profile(theta)
                if profile is None:
                    return (math.inf, np.zeros(free.size)) if not central else math.inf
                return profile.objective if central else (profile.objective, profile.gradient[free])
            if central:
                return -likelihood(theta)
            value, grad = likelihood.derivatives(theta)
            if not math.isfinite(value):
                return math.inf, np.zeros(free.size)
            return -value, -grad[free]

        solution = minimize_bounded(
            objective,
            self._initial(likelihood, free, base),
            lower=np.zeros(free.size),
            jac="3-point" if central else True,
            tol=self.config.tol_mle,
            ftol=self.config.mle_ftol,
            max_iterations=self.config.max_mle_iterations,
        )
        theta = full(np.array(solution.x))
        value = likelihood(theta)
        if not math.isfinite(value):
            raise NotPositiveDefiniteError("Cost Hessian is not positive definite at the estimate")
        rationality = None
        if profiled:
            profile = likelihood.profile(theta)
            rationality = profile.rationality if profile is not None else None
        return theta, solution.converged, solution.trace(value, rationality)

    def _result(
        self,
        tag: ConceptTag,
        scope: CostScope,
        theta: np.ndarray,
        fixed: Sequence[FixedWeight],
        converged: bool,
        trace: OptimizerTrace,
        variant: DVariant,
        stacked: bool = False,
    ) -> IdentificationResult:
        per_player: List[np.ndarray] = []
        for p in scope.players:
            per_player.append(np.array([theta[pos] for pos, (q, _) in enumerate(scope.features) if q == p]))
        kept = tuple(fw for fw in fixed if fw.player in scope.players)
        result = IdentificationResult(
            scope=tag,
            players=scope.players,
            theta=tuple(per_player),
            stacked=theta if stacked else None,
            fixed=kept,
            converged=converged,
            trace=trace,
            d_variant=variant,
        )
        logger.info(
            "Identification finished",
            scope=tag,
            players=[p + 1 for p in scope.players],
            converged=result.converged,
            iterations=result.trace.iterations,
            log_likelihood=result.trace.log_likelihood,
            rationality=result.trace.rationality,
        )
        return result

    def identify_cooperative(
        self,
        demonstrations: Demonstrations,
        game: GameDefinition,
        fixed: Optional[Sequence[FixedWeight]] = None,
        variant: Optional[DVariant] = None,
    ) -> IdentificationResult:
        """theta_Sigma maximizing the joint-scope likelihood of all players' controls."""
        variant = variant or self.config.d_variant
        demos = self._demonstrations(demonstrations, game)
        scope = CostScope.joint(game)
        fixed = tuple(fixed) if fixed else default_fixed_weights(game, scope.players)
        likelihood = LogLikelihood(demos, game, scope, variant, self.config.condition_limit)
        theta, converged, trace = self._maximize(likelihood, scope, self._fixed_positions(scope, fixed))
        return self._result("CG", scope, theta, fixed, converged, trace, variant, stacked=True)

    def identify_open_loop(
        self,
        demonstrations: Demonstrations,
        game: GameDefinition,
        player: int,
        fixed: Optional[Sequence[FixedWeight]] = None,
        variant: Optional[DVariant] = None,
    ) -> IdentificationResult:
        """theta_i maximizing player i's likelihood with the other players' observed controls fixed."""
        variant = variant or self.config.d_variant
        demos = self._demonstrations(demonstrations, game)
        scope = CostScope.player(game, player)
        fixed = tuple(fixed) if fixed else default_fixed_weights(game, scope.players)
        likelihood = LogLikelihood(demos, game, scope, variant, self.config.condition_limit)
        theta, converged, trace = self._maximize(likelihood, scope, self._fixed_positions(scope, fixed))
        return self._result("OL-Nash", scope, theta, fixed, converged, trace, variant)

    def identify_feedback(
        self,
        demonstrations: Demonstrations,
        game: GameDefinition,
        player: int,
        laws: Union[FeedbackGains, Mapping[int, FeedbackLaw]],
        fixed: Optional[Sequence[FixedWeight]] = None,
        variant: Optional[DVariant] = None,
    ) -> IdentificationResult:
        """theta_i under the closed-loop dynamics obtained by substituting the other players' laws."""
        variant = variant or self.config.d_variant
        if isinstance(laws, FeedbackGains):
            laws = laws_from_gains(laws, exclude=player)
        closed = closed_loop_dynamics(game, laws, player)
        trajs = demonstrations.trajectories if isinstance(demonstrations, DemonstrationSet) else tuple(demonstrations)
        self._warn_infeasible(trajs, game)
        demos = build_demonstration_set([project_trajectory(t, player) for t in trajs], closed)
        scope = CostScope.player(closed, 0)
        fixed = tuple(fixed) if fixed else default_fixed_weights(game, (player,))
        local = [FixedWeight(player=0, index=fw.index, value=fw.value) for fw in fixed if fw.player == player]
        likelihood = LogLikelihood(demos, closed, scope, variant, self.config.condition_limit)
        theta, converged, trace = self._maximize(likelihood, scope, self._fixed_positions(scope, local))
        result = self._result("FB-Nash", scope, theta, local, converged, trace, variant)
        return result.model_copy(
            update={"players": (player,), "fixed": tuple(FixedWeight(player=player, index=fw.index, value=fw.value) for fw in local)}
        )
