from abc import ABC, abstractmethod
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, field_validator, model_validator

from app.models.base import Array, FrozenModel
from app.models.dynamics import DiscreteDynamics


class Feature(ABC):
    """A scalar feature eta(z) of the joint stage vector z = [x; u_1; ...; u_N].

    ``key`` identifies the feature across players: two features with the same key
    are the same function of z.
    """

    key: str

    @abstractmethod
    def value(self, k: int, z: np.ndarray) -> float:
        """Evaluate the feature at step k."""

    @abstractmethod
    def derivatives(self, k: int, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (gradient, Hessian) with respect to z at step k."""

    def stage_values(self, stages: np.ndarray) -> np.ndarray:
        return np.array([self.value(k, z) for k, z in enumerate(stages)])

    def batch_counts(self, stages: np.ndarray) -> np.ndarray:
        """Feature counts of a (draws, k_E, stage) batch of trajectories."""
        return np.array([self.stage_values(s).sum() for s in stages])

    def stage_derivatives(self, stages: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [self.derivatives(k, z) for k, z in enumerate(stages)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.key!r})"


class QuadraticFeature(Feature):
    """eta(z) = -z^T W z, the negated quadratic form of the benchmark games."""

    def __init__(self, weight: np.ndarray, key: str):
        weight = np.asarray(weight, dtype=float)
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
            raise ValueError(f"Feature weight must be square, got {weight.shape}")
        self.weight = 0.5 * (weight + weight.T)
        self.key = key

    @classmethod
    def negated_square(cls, index: int, dim: int, key: str, scale: float = 1.0) -> "QuadraticFeature":
        w = np.zeros((dim, dim))
        w[index, index] = scale
        return cls(w, key)

    def value(self, k: int, z: np.ndarray) -> float:
        return float(-z @ self.weight @ z)

    def derivatives(self, k: int, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return -2.0 * self.weight @ z, -2.0 * self.weight

    def stage_values(self, stages: np.ndarray) -> np.ndarray:
        return -np.einsum("ki,ij,kj->k", stages, self.weight, stages)

    def batch_counts(self, stages: np.ndarray) -> np.ndarray:
        return -np.einsum("rki,ij,rkj->r", stages, self.weight, stages, optimize=True)

    def stage_derivatives(self, stages: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grads = -2.0 * stages @ self.weight
        hess = np.broadcast_to(-2.0 * self.weight, (len(stages),) + self.weight.shape)
        return grads, hess


class GameDefinition(FrozenModel):
    """N players controlling one discrete-time system over k_E samples."""

    name: str = "custom"
    state_dim: int = Field(..., ge=1)
    control_dims: Tuple[int, ...]
    horizon: int = Field(..., ge=2, description="Number of samples k_E")
    dt: float = Field(..., gt=0, description="Sampling time in seconds")
    dynamics: DiscreteDynamics
    features: Tuple[Tuple[Feature, ...], ...]

    @field_validator("control_dims")
    @classmethod
    def positive_controls(cls, v):
        if len(v) < 1 or any(m < 1 for m in v):
            raise ValueError("Every player needs at least one control channel")
        return tuple(v)

    @model_validator(mode="after")
    def consistent(self):
        if len(self.features) != len(self.control_dims):
            raise ValueError("One feature set per player is required")
        if any(len(fs) < 1 for fs in self.features):
            raise ValueError("Every player needs at least one feature")
        if self.dynamics.state_dim != self.state_dim or tuple(self.dynamics.control_dims) != self.control_dims:
            raise ValueError("Dynamics dimensions do not match the game")
        return self

    @property
    def player_count(self) -> int:
        return len(self.control_dims)

    @property
    def feature_dims(self) -> Tuple[int, ...]:
        return tuple(len(fs) for fs in self.features)

    @property
    def joint_dim(self) -> int:
        return self.state_dim + sum(self.control_dims)

    def control_slice(self, player: int) -> slice:
        """Position of u_player inside the joint stage vector."""
        start = self.state_dim + sum(self.control_dims[:player])
        return slice(start, start + self.control_dims[player])

    def with_horizon(self, horizon: int) -> "GameDefinition":
        return self.model_copy(update={"horizon": horizon})


class FixedWeight(FrozenModel):
    """Weight held fixed during identification (0-based player and index)."""

    player: int = Field(..., ge=0)
    index: int = Field(..., ge=0)
    value: float


class CostParameters(FrozenModel):
    theta: Tuple[Array, ...]
    fixed: Tuple[FixedWeight, ...] = ()

    @field_validator("theta")
    @classmethod
    def vectors(cls, v):
        for i, t in enumerate(v):
            if t.ndim != 1 or t.size < 1:
                raise ValueError(f"theta for player {i} must be a non-empty vector")
        return v

    @classmethod
    def from_lists(cls, theta: Sequence[Sequence[float]], fixed: Sequence[FixedWeight] = ()) -> "CostParameters":
        return cls(theta=tuple(np.asarray(t, dtype=float) for t in theta), fixed=tuple(fixed))

    def scaled(self, c: float) -> "CostParameters":
        return CostParameters(theta=tuple(c * t for t in self.theta), fixed=self.fixed)

    def fixed_for(self, player: int) -> Optional[FixedWeight]:
        return next((f for f in self.fixed if f.player == player), None)


class ExtendedFeatureMap(FrozenModel):
    """Deduplicated features of all players and each player's embedding into them."""

    keys: Tuple[str, ...]
    representatives: Tuple[Tuple[int, int], ...] = Field(
        ..., description="(player, feature index) evaluated for each extended entry"
    )
    embeddings: Tuple[Tuple[int, ...], ...]

    @property
    def dim(self) -> int:
        return len(self.keys)

    def extend(self, theta: np.ndarray, player: int) -> np.ndarray:
        """Scatter theta_i into the extended index space (zeros elsewhere)."""
        out = np.zeros(self.dim)
        np.add.at(out, list(self.embeddings[player]), theta)
        return out

    def extend_all(self, theta: Sequence[np.ndarray]) -> List[np.ndarray]:
        return [self.extend(t, i) for i, t in enumerate(theta)]
