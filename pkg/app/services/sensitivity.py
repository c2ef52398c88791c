"""Control-to-state sensitivities along a trajectory and per-feature quadratic models.

States and controls are stacked time-major: x = [x^(1); ...; x^(k_E)] and, for a
scope of players P, u = [u_P^(1); ...; u_P^(k_E)] with u_P^(k) the concatenation of
the players' controls at step k.
"""
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import DimensionMismatchError
from app.models.dynamics import StepSensitivities
from app.models.game import Feature, GameDefinition
from app.models.results import ControlJacobian, DVariant
from app.models.trajectory import Trajectory
from app.services.game import check_dimensions

Players = Union[int, Sequence[int]]


def _players(game: GameDefinition, players: Players) -> Tuple[int, ...]:
    out = (players,) if isinstance(players, (int, np.integer)) else tuple(players)
    if not out:
        raise DimensionMismatchError("Scope needs at least one player")
    for p in out:
        if not 0 <= p < game.player_count:
            raise DimensionMismatchError(f"Player {p + 1} does not exist", player=p + 1)
    return tuple(int(p) for p in out)


def step_sensitivities(traj: Trajectory, game: GameDefinition) -> StepSensitivities:
    check_dimensions(traj, game)
    a, bs = [], []
    for k in range(traj.horizon - 1):
        ak, bk = game.dynamics.linearize(k, traj.states[k], traj.stage_controls(k))
        a.append(ak)
        bs.append(bk)
    return StepSensitivities(
        a=np.stack(a),
        b=tuple(np.stack([bk[i] for bk in bs]) for i in range(game.player_count)),
    )


def state_sensitivity(sens: StepSensitivities, players: Sequence[int], variant: DVariant = "plain") -> np.ndarray:
    """dx/du for the given players as a (k_E, n, k_E * m) array.

    Row block k2 holds dx^(k2)/du; it is zero in every column block k1 >= k2.
    The trapezoid variant averages row blocks k2 and k2 + 1, keeping the last one.
    """
    steps, n = sens.a.shape[0], sens.a.shape[1]
    horizon = steps + 1
    b = np.concatenate([sens.b[p] for p in players], axis=2)
    m = b.shape[2]
    s = np.zeros((horizon, n, horizon, m))
    for k2 in range(1, horizon):
        s[k2] = np.einsum("ij,jkl->ikl", sens.a[k2 - 1], s[k2 - 1])
        s[k2, :, k2 - 1, :] += b[k2 - 1]
    if variant == "trapezoid":
        s[:-1] = 0.5 * (s[:-1] + s[1:])
    elif variant != "plain":
        raise ValueError(f"Unknown D variant '{variant}'")
    return s.reshape(horizon, n, horizon * m)


def control_jacobian(
    traj: Trajectory,
    game: GameDefinition,
    players: Players,
    variant: DVariant = "plain",
    sens: Optional[StepSensitivities] = None,
) -> ControlJacobian:
    """D = (dx/du)^T with blocks D_{k1,k2} = (dx^(k2)/du^(k1))^T."""
    scope = _players(game, players)
    if sens is None:
        sens = step_sensitivities(traj, game)
    if sens.steps != traj.horizon - 1:
        raise DimensionMismatchError("Sensitivities were not evaluated along this trajectory")
    s = state_sensitivity(sens, scope, variant)
    horizon, n = s.shape[0], s.shape[1]
    return ControlJacobian(players=scope, variant=variant, matrix=s.reshape(horizon * n, -1).T)


def sensitivity_from_jacobian(d: ControlJacobian, horizon: int, state_dim: int) -> np.ndarray:
    return d.matrix.T.reshape(horizon, state_dim, -1)


def control_indices(game: GameDefinition, players: Sequence[int]) -> np.ndarray:
    """Positions of the scope's controls inside the joint stage vector."""
    return np.concatenate([np.arange(game.control_slice(p).start, game.control_slice(p).stop) for p in players])


def feature_count_model(
    stages: np.ndarray,
    feature: Feature,
    game: GameDefinition,
    players: Sequence[int],
    s: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and Gauss-Newton Hessian of one feature count w.r.t. the scope's controls.

    grad = d mu/du + S^T d mu/dx
    hess = d2 mu/du2 + S^T (d2 mu/dx2) S + S^T (d2 mu/dx du) + (d2 mu/dx du)^T S
    """
    n = game.state_dim
    horizon = stages.shape[0]
    uidx = control_indices(game, players)
    m = uidx.size
    grads, hess = feature.stage_derivatives(stages)
    hx, hu = grads[:, :n], grads[:, uidx]
    hxx = hess[:, :n, :n]
    huu = hess[:, uidx][:, :, uidx]
    hxu = hess[:, :n][:, :, uidx]

    grad = hu.reshape(-1) + np.einsum("kia,ki->a", s, hx)
    big = np.einsum("kia,kij,kjb->ab", s, hxx, s, optimize=True)
    for k in range(horizon):
        big[k * m:(k + 1) * m, k * m:(k + 1) * m] += huu[k]
    if np.any(hxu):
        cross = np.einsum("kia,kij->akj", s, hxu).reshape(horizon * m, horizon * m)
        big += cross + cross.T
    return grad, 0.5 * (big + big.T)


def feature_count_models(
    traj: Trajectory,
    game: GameDefinition,
    features: Sequence[Feature],
    players: Sequence[int],
    s: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked (p, d) gradients and (p, d, d) Hessians for several features."""
    stages = traj.joint_stages()
    pairs: List[Tuple[np.ndarray, np.ndarray]] = [feature_count_model(stages, f, game, players, s) for f in features]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
