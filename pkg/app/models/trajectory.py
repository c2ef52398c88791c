from typing import List, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator

from app.models.base import Array, FrozenModel


class Trajectory(FrozenModel):
    """States and per-player controls over k = 1..k_E, stored time-major.

    ``states`` has shape (k_E, n) and ``controls[i]`` has shape (k_E, m_i); row k-1
    holds x^(k) and u_i^(k).
    """

    states: Array
    controls: Tuple[Array, ...]

    @model_validator(mode="after")
    def shapes(self):
        if self.states.ndim != 2:
            raise ValueError("states must be a (k_E, n) array")
        horizon = self.states.shape[0]
        for i, u in enumerate(self.controls):
            if u.ndim != 2 or u.shape[0] != horizon:
                raise ValueError(f"controls of player {i} must be a ({horizon}, m_i) array")
        if not self.controls:
            raise ValueError("At least one player is required")
        return self

    @classmethod
    def from_arrays(cls, states: np.ndarray, controls: Sequence[np.ndarray]) -> "Trajectory":
        return cls(states=np.asarray(states, dtype=float), controls=tuple(np.asarray(u, dtype=float) for u in controls))

    @property
    def horizon(self) -> int:
        return int(self.states.shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    @property
    def control_dims(self) -> Tuple[int, ...]:
        return tuple(int(u.shape[1]) for u in self.controls)

    @property
    def initial_state(self) -> np.ndarray:
        return self.states[0]

    def stage_controls(self, k: int) -> List[np.ndarray]:
        return [u[k] for u in self.controls]

    def joint_stages(self) -> np.ndarray:
        """Rows z^(k) = [x^(k); u_1^(k); ...; u_N^(k)]."""
        return np.hstack([self.states, *self.controls])

    def with_controls(self, player: int, controls: np.ndarray) -> "Trajectory":
        updated = list(self.controls)
        updated[player] = np.asarray(controls, dtype=float)
        return Trajectory(states=self.states, controls=tuple(updated))


class DemonstrationSet(FrozenModel):
    """Observed trajectories and their per-player mean feature counts."""

    trajectories: Tuple[Trajectory, ...] = Field(..., min_length=1)
    mean_feature_counts: Tuple[Array, ...]

    @model_validator(mode="after")
    def same_dimensions(self):
        first = self.trajectories[0]
        for t in self.trajectories[1:]:
            if t.state_dim != first.state_dim or t.control_dims != first.control_dims:
                raise ValueError("All demonstrations must share the game dimensions")
        return self

    @property
    def size(self) -> int:
        return len(self.trajectories)
