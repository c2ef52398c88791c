from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import model_validator
from scipy.linalg import expm

from app.models.base import Array, FrozenModel
from app.models.dynamics import ContinuousSystem, DiscreteDynamics


def exact_discretization(a: np.ndarray, bs: Sequence[np.ndarray], dt: float) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Zero-order-hold discretization via one augmented matrix exponential.

    expm([[A, B], [0, 0]] dt) = [[exp(A dt), int_0^dt exp(A s) ds B], [0, I]].
    """
    n = a.shape[0]
    b = np.hstack(bs)
    aug = np.zeros((n + b.shape[1], n + b.shape[1]))
    aug[:n, :n] = a
    aug[:n, n:] = b
    phi = expm(aug * dt)
    a_d = phi[:n, :n]
    b_d = phi[:n, n:]
    splits = np.cumsum([bi.shape[1] for bi in bs])[:-1]
    return a_d, [np.ascontiguousarray(blk) for blk in np.split(b_d, splits, axis=1)]


class LinearGameMatrices(FrozenModel):
    """x' = A x + sum_i B_i u_i, with the discrete pair once ``dt`` is set."""

    a: Array
    b: Tuple[Array, ...]
    dt: Optional[float] = None
    a_d: Optional[Array] = None
    b_d: Optional[Tuple[Array, ...]] = None

    @model_validator(mode="after")
    def dimensions(self):
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise ValueError("A must be square")
        for i, bi in enumerate(self.b):
            if bi.ndim != 2 or bi.shape[0] != n:
                raise ValueError(f"B_{i + 1} must have {n} rows")
        return self

    @property
    def state_dim(self) -> int:
        return int(self.a.shape[0])

    @property
    def control_dims(self) -> Tuple[int, ...]:
        return tuple(int(bi.shape[1]) for bi in self.b)

    def discretized(self, dt: float) -> "LinearGameMatrices":
        a_d, b_d = exact_discretization(self.a, self.b, dt)
        return self.model_copy(update={"dt": dt, "a_d": a_d, "b_d": tuple(b_d)})

    @classmethod
    def from_discrete(cls, a_d: np.ndarray, b_d: Sequence[np.ndarray], dt: float) -> "LinearGameMatrices":
        """Game given directly in discrete time; the continuous pair is left at the discrete values."""
        a_d = np.asarray(a_d, dtype=float)
        b_d = tuple(np.asarray(b, dtype=float) for b in b_d)
        return cls(a=a_d, b=b_d, dt=dt, a_d=a_d, b_d=b_d)

    def require_discrete(self) -> Tuple[np.ndarray, Tuple[np.ndarray, ...]]:
        if self.a_d is None or self.b_d is None:
            raise ValueError("Linear game has not been discretized")
        return self.a_d, self.b_d


class LinearContinuousSystem(ContinuousSystem):
    def __init__(self, matrices: LinearGameMatrices):
        self.matrices = matrices
        self.state_dim = matrices.state_dim
        self.control_dims = matrices.control_dims

    def deriv(self, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        out = self.matrices.a @ x
        for bi, ui in zip(self.matrices.b, controls):
            out = out + bi @ ui
        return out

    def jacobians(self, x: np.ndarray, controls: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
        return np.array(self.matrices.a), [np.array(bi) for bi in self.matrices.b]


class LinearDiscreteDynamics(DiscreteDynamics):
    """x+ = A_d x + sum_i B_d,i u_i; sensitivities are constant."""

    is_linear = True

    def __init__(self, a_d: np.ndarray, b_d: Sequence[np.ndarray]):
        self.a_d = np.asarray(a_d, dtype=float)
        self.b_d = [np.asarray(b, dtype=float) for b in b_d]
        self.state_dim = int(self.a_d.shape[0])
        self.control_dims = tuple(int(b.shape[1]) for b in self.b_d)

    @classmethod
    def from_matrices(cls, matrices: LinearGameMatrices) -> "LinearDiscreteDynamics":
        a_d, b_d = matrices.require_discrete()
        return cls(a_d, b_d)

    def step(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        out = self.a_d @ x
        for b, u in zip(self.b_d, controls):
            out = out + b @ u
        return out

    def linearize(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
        return self.a_d, self.b_d
