"""Rewrite a game from one player's point of view once the others' laws are known.

With u_j = gamma_j(x) substituted for every j != i, the dynamics and player i's
features become functions of (x, u_i) only.
"""
from abc import ABC, abstractmethod
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigurationError
from app.models.dynamics import DiscreteDynamics
from app.models.game import Feature, GameDefinition, QuadraticFeature
from app.models.results import FeedbackGains
from app.models.trajectory import Trajectory


class FeedbackLaw(ABC):
    """u_j^(k) = gamma_j^(k)(x)."""

    @abstractmethod
    def control(self, k: int, x: np.ndarray) -> np.ndarray:
        """Evaluate the law."""

    @abstractmethod
    def jacobian(self, k: int, x: np.ndarray) -> np.ndarray:
        """d gamma / dx, shape (m_j, n)."""

    @property
    def linear_stationary(self) -> Optional[np.ndarray]:
        """The constant gain when the law is u = K x, otherwise None."""
        return None


class LinearFeedbackLaw(FeedbackLaw):
    def __init__(self, gain: np.ndarray):
        gain = np.asarray(gain, dtype=float)
        if gain.ndim not in (2, 3):
            raise ValueError("Gain must be (m, n) or (k_E, m, n)")
        self.gain = gain

    def _at(self, k: int) -> np.ndarray:
        return self.gain if self.gain.ndim == 2 else self.gain[min(k, self.gain.shape[0] - 1)]

    def control(self, k: int, x: np.ndarray) -> np.ndarray:
        return self._at(k) @ x

    def jacobian(self, k: int, x: np.ndarray) -> np.ndarray:
        return self._at(k)

    @property
    def linear_stationary(self) -> Optional[np.ndarray]:
        return self.gain if self.gain.ndim == 2 else None


def laws_from_gains(gains: FeedbackGains, exclude: Optional[int] = None) -> Dict[int, FeedbackLaw]:
    return {j: LinearFeedbackLaw(g) for j, g in enumerate(gains.gains) if j != exclude}


class _Expansion:
    """z_i = [x; u_i]  ->  z = [x; u_1; ...; u_N] with the laws substituted."""

    def __init__(self, game: GameDefinition, laws: Mapping[int, FeedbackLaw], player: int):
        self.game = game
        self.laws = laws
        self.player = player
        self.n = game.state_dim

    def controls(self, k: int, x: np.ndarray, u_i: np.ndarray) -> List[np.ndarray]:
        return [u_i if j == self.player else self.laws[j].control(k, x) for j in range(self.game.player_count)]

    def jacobian(self, k: int, x: np.ndarray) -> np.ndarray:
        n, m_i = self.n, self.game.control_dims[self.player]
        m = np.zeros((self.game.joint_dim, n + m_i))
        m[:n, :n] = np.eye(n)
        for j in range(self.game.player_count):
            sl = self.game.control_slice(j)
            if j == self.player:
                m[sl, n:] = np.eye(m_i)
            else:
                m[sl, :n] = self.laws[j].jacobian(k, x)
        return m

    def __call__(self, k: int, z_i: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, u_i = z_i[: self.n], z_i[self.n:]
        return np.concatenate([x, *self.controls(k, x, u_i)]), self.jacobian(k, x)

    @property
    def constant_jacobian(self) -> Optional[np.ndarray]:
        if all(self.laws[j].linear_stationary is not None for j in self.laws):
            return self.jacobian(0, np.zeros(self.n))
        return None


class ComposedFeature(Feature):
    """eta_i(x, gamma(x), u_i); the law curvature is dropped (exact for linear laws)."""

    def __init__(self, base: Feature, expansion: _Expansion):
        self.base = base
        self.expansion = expansion
        self.key = base.key

    def value(self, k: int, z: np.ndarray) -> float:
        full, _ = self.expansion(k, z)
        return self.base.value(k, full)

    def derivatives(self, k: int, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        full, m = self.expansion(k, z)
        grad, hess = self.base.derivatives(k, full)
        return m.T @ grad, m.T @ hess @ m


def compose_feature(feature: Feature, expansion: _Expansion) -> Feature:
    m = expansion.constant_jacobian
    if m is not None and isinstance(feature, QuadraticFeature):
        return QuadraticFeature(m.T @ feature.weight @ m, feature.key)
    return ComposedFeature(feature, expansion)


class ClosedLoopDynamics(DiscreteDynamics):
    def __init__(self, base: DiscreteDynamics, expansion: _Expansion):
        self.base = base
        self.expansion = expansion
        self.state_dim = base.state_dim
        self.control_dims = (base.control_dims[expansion.player],)

    @property
    def is_linear(self) -> bool:
        return self.base.is_linear and self.expansion.constant_jacobian is not None

    def step(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        return self.base.step(k, x, self.expansion.controls(k, x, controls[0]))

    def linearize(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
        full = self.expansion.controls(k, x, controls[0])
        a, bs = self.base.linearize(k, x, full)
        a = np.array(a, dtype=float)
        for j, law in self.expansion.laws.items():
            a = a + bs[j] @ law.jacobian(k, x)
        return a, [bs[self.expansion.player]]


def closed_loop_dynamics(game: GameDefinition, laws: Mapping[int, FeedbackLaw], player: int) -> GameDefinition:
    """Single-player game of ``player`` with every other player's law substituted."""
    if not 0 <= player < game.player_count:
        raise ConfigurationError(f"Player {player} does not exist")
    missing = [j for j in range(game.player_count) if j != player and j not in laws]
    if missing:
        raise ConfigurationError(f"Missing feedback law for players {missing}", players=missing)
    others = {j: law for j, law in laws.items() if j != player}
    expansion = _Expansion(game, others, player)
    return GameDefinition(
        name=f"{game.name}/closed-loop-{player + 1}",
        state_dim=game.state_dim,
        control_dims=(game.control_dims[player],),
        horizon=game.horizon,
        dt=game.dt,
        dynamics=ClosedLoopDynamics(game.dynamics, expansion),
        features=(tuple(compose_feature(f, expansion) for f in game.features[player]),),
    )


def project_trajectory(traj: Trajectory, player: int) -> Trajectory:
    """Keep the states and ``player``'s controls: the closed-loop view of a joint trajectory."""
    return Trajectory(states=traj.states, controls=(traj.controls[player],))


def expand_trajectory(traj: Trajectory, game: GameDefinition, laws: Mapping[int, FeedbackLaw], player: int) -> Trajectory:
    """Rebuild the joint trajectory from a closed-loop one by evaluating the laws."""
    controls = []
    for j in range(game.player_count):
        if j == player:
            controls.append(np.array(traj.controls[0]))
        else:
            controls.append(np.stack([laws[j].control(k, x) for k, x in enumerate(traj.states)]))
    return Trajectory(states=traj.states, controls=tuple(controls))
