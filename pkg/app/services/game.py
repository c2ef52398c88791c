"""Feature counts, costs, parameter stacking, extended features and rollouts."""
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.exceptions import ConfigurationError, DimensionMismatchError, DivergenceError
from app.models.game import CostParameters, ExtendedFeatureMap, GameDefinition
from app.models.trajectory import DemonstrationSet, Trajectory

logger = structlog.get_logger(__name__)

FeatureRef = Tuple[int, int]
EqualityTable = Mapping[FeatureRef, Iterable[FeatureRef]]


def check_dimensions(traj: Trajectory, game: GameDefinition) -> None:
    if traj.state_dim != game.state_dim:
        raise DimensionMismatchError(f"Trajectory has {traj.state_dim} states, game expects {game.state_dim}")
    if len(traj.controls) != game.player_count:
        raise DimensionMismatchError(
            f"Trajectory has controls for {len(traj.controls)} players, game has {game.player_count}"
        )
    for i, (got, want) in enumerate(zip(traj.control_dims, game.control_dims)):
        if got != want:
            raise DimensionMismatchError(
                f"Player {i + 1} has {got} control channels, game expects {want}", player=i + 1
            )


def _check_player(game: GameDefinition, player: int) -> None:
    if not 0 <= player < game.player_count:
        raise DimensionMismatchError(f"Player {player + 1} does not exist", player=player + 1)


def feature_count(traj: Trajectory, game: GameDefinition, player: int) -> np.ndarray:
    """mu_i = sum over k of eta_i(x^(k), u_1^(k), ..., u_N^(k))."""
    check_dimensions(traj, game)
    _check_player(game, player)
    stages = traj.joint_stages()
    return np.array([f.stage_values(stages).sum() for f in game.features[player]])


def trajectory_cost(traj: Trajectory, theta: CostParameters, game: GameDefinition, player: int) -> float:
    mu = feature_count(traj, game, player)
    t = theta.theta[player]
    if t.shape != mu.shape:
        raise DimensionMismatchError(
            f"theta of player {player + 1} has {t.size} entries, player has {mu.size} features", player=player + 1
        )
    return float(-(t @ mu))


def stack_global(theta: CostParameters) -> Tuple[np.ndarray, Tuple[FeatureRef, ...]]:
    """theta_Sigma = [theta_1; ...; theta_N] and the (player, feature) order of its entries."""
    order = tuple((i, f) for i, t in enumerate(theta.theta) for f in range(t.size))
    return np.concatenate(theta.theta), order


def global_feature_count(traj: Trajectory, game: GameDefinition) -> np.ndarray:
    return np.concatenate([feature_count(traj, game, i) for i in range(game.player_count)])


def stacked_cost(theta_sigma: np.ndarray, mu_sigma: np.ndarray, feature_dims: Sequence[int]) -> float:
    """-theta_Sigma^T mu_Sigma, summed player by player in index order."""
    if theta_sigma.shape != mu_sigma.shape or theta_sigma.size != sum(feature_dims):
        raise DimensionMismatchError("Stacked parameters and feature counts disagree")
    splits = np.cumsum(feature_dims)[:-1]
    total = 0.0
    for t, mu in zip(np.split(theta_sigma, splits), np.split(mu_sigma, splits)):
        total += float(-(t @ mu))
    return total


def global_cost(traj: Trajectory, theta: CostParameters, game: GameDefinition) -> float:
    total = 0.0
    for i in range(game.player_count):
        total += trajectory_cost(traj, theta, game, i)
    return total


def equality_from_keys(game: GameDefinition) -> Dict[FeatureRef, List[FeatureRef]]:
    """Equality table declaring every pair of features with the same key identical."""
    by_key: Dict[str, List[FeatureRef]] = {}
    for i, fs in enumerate(game.features):
        for a, f in enumerate(fs):
            by_key.setdefault(f.key, []).append((i, a))
    return {ref: [o for o in group if o != ref] for group in by_key.values() for ref in group}


def build_extended_features(game: GameDefinition, equality: Optional[EqualityTable] = None) -> ExtendedFeatureMap:
    """Deduplicate the players' features using an explicit equality table."""
    equality = equality_from_keys(game) if equality is None else equality
    refs = [(i, a) for i, fs in enumerate(game.features) for a in range(len(fs))]
    known = set(refs)
    parent = {r: r for r in refs}

    def find(r: FeatureRef) -> FeatureRef:
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    for ref, others in equality.items():
        others = list(others)
        for o in [ref, *others]:
            if o not in known:
                raise ConfigurationError(f"Equality table references unknown feature {o}")
        for o in others:
            if ref not in equality.get(o, ()):
                raise ConfigurationError(f"Equality table is not symmetric: {ref} -> {o} has no reverse entry")
            ra, rb = find(ref), find(o)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    index: Dict[FeatureRef, int] = {}
    keys: List[str] = []
    representatives: List[FeatureRef] = []
    for r in refs:
        root = find(r)
        if root not in index:
            index[root] = len(keys)
            keys.append(game.features[root[0]][root[1]].key)
            representatives.append(root)
    embeddings = tuple(
        tuple(index[find((i, a))] for a in range(len(fs))) for i, fs in enumerate(game.features)
    )
    logger.debug("Built extended features", dim=len(keys), keys=keys)
    return ExtendedFeatureMap(keys=tuple(keys), representatives=tuple(representatives), embeddings=embeddings)


def extended_feature_count(traj: Trajectory, game: GameDefinition, fmap: ExtendedFeatureMap) -> np.ndarray:
    check_dimensions(traj, game)
    stages = traj.joint_stages()
    return np.array([game.features[i][a].stage_values(stages).sum() for i, a in fmap.representatives])


def rollout(
    game: GameDefinition,
    controls: Sequence[np.ndarray],
    x1: np.ndarray,
    horizon: Optional[int] = None,
) -> Trajectory:
    """Iterate the dynamics from x1 under the given control sequences."""
    horizon = horizon or game.horizon
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    if x1.size != game.state_dim:
        raise DimensionMismatchError(f"Initial state has {x1.size} entries, game expects {game.state_dim}")
    if len(controls) != game.player_count:
        raise DimensionMismatchError(f"Expected controls for {game.player_count} players, got {len(controls)}")
    us = []
    for i, (u, m) in enumerate(zip(controls, game.control_dims)):
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u.reshape(-1, 1)
        if u.shape != (horizon, m):
            raise DimensionMismatchError(
                f"Controls of player {i + 1} have shape {np.shape(u)}, expected {(horizon, m)}", player=i + 1
            )
        us.append(u)
    states = np.empty((horizon, game.state_dim))
    states[0] = x1
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon - 1):
            states[k + 1] = game.dynamics.step(k, states[k], [u[k] for u in us])
            if not np.all(np.isfinite(states[k + 1])):
                raise DivergenceError(step=k + 2)
    return Trajectory(states=states, controls=tuple(us))


def feasibility_residuals(traj: Trajectory, game: GameDefinition) -> np.ndarray:
    """||x^(k+1) - f^(k)(x^(k), u^(k))||_inf for k < k_E."""
    check_dimensions(traj, game)
    out = np.empty(traj.horizon - 1)
    for k in range(traj.horizon - 1):
        predicted = game.dynamics.step(k, traj.states[k], traj.stage_controls(k))
        out[k] = np.max(np.abs(traj.states[k + 1] - predicted))
    return out


def is_feasible(traj: Trajectory, game: GameDefinition, tol: float = 1e-9) -> bool:
    scale = 1.0 + np.max(np.abs(traj.states[1:]), axis=1)
    return bool(np.all(feasibility_residuals(traj, game) <= tol * scale))


def build_demonstration_set(trajectories: Sequence[Trajectory], game: GameDefinition) -> DemonstrationSet:
    if not trajectories:
        raise ConfigurationError("At least one demonstration is required")
    counts = [
        np.mean([feature_count(t, game, i) for t in trajectories], axis=0) for i in range(game.player_count)
    ]
    return DemonstrationSet(trajectories=tuple(trajectories), mean_feature_counts=tuple(counts))
