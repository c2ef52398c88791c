from abc import ABC, abstractmethod
from typing import List, Sequence, Tuple

import numpy as np

from app.models.base import Array, FrozenModel


class ContinuousSystem(ABC):
    """Vector field x' = f(x, u_1, ..., u_N) with analytic Jacobians."""

    state_dim: int
    control_dims: Tuple[int, ...]

    @abstractmethod
    def deriv(self, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        """Evaluate the state derivative."""

    @abstractmethod
    def jacobians(
        self, x: np.ndarray, controls: Sequence[np.ndarray]
    ) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Return (df/dx, [df/du_i])."""


class DiscreteDynamics(ABC):
    """One-step map x^(k+1) = f^(k)(x^(k), u_1^(k), ..., u_N^(k)).

    ``linearize`` returns the step sensitivities (dx+/dx, [dx+/du_i]) and is the
    only derivative information the solvers and the likelihood consume.
    """

    state_dim: int
    control_dims: Tuple[int, ...]
    is_linear: bool = False

    @abstractmethod
    def step(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        """Advance the state by one sample."""

    @abstractmethod
    def linearize(
        self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]
    ) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Return (dx+/dx, [dx+/du_i]) at step k."""

    def step_with_sensitivities(
        self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]
    ) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
        a, bs = self.linearize(k, x, controls)
        return self.step(k, x, controls), a, bs


class StepSensitivities(FrozenModel):
    """dx^(k+1)/dx^(k) as ``a`` (k_E-1, n, n) and dx^(k+1)/du_i^(k) as ``b[i]`` (k_E-1, n, m_i)."""

    a: Array
    b: Tuple[Array, ...]

    @property
    def steps(self) -> int:
        return int(self.a.shape[0])
