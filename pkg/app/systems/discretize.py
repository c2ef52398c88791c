from typing import List, Literal, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigurationError
from app.models.dynamics import ContinuousSystem, DiscreteDynamics
from app.systems.linear import LinearContinuousSystem, LinearDiscreteDynamics

Method = Literal["rk4", "exact-linear"]


class RK4Dynamics(DiscreteDynamics):
    """Classical fourth-order step with zero-order-hold controls.

    Sensitivities come from differentiating the four stages, so they are the
    exact derivatives of the discrete map.
    """

    def __init__(self, system: ContinuousSystem, dt: float):
        if dt <= 0:
            raise ConfigurationError(f"Sampling time must be positive, got {dt}")
        self.system = system
        self.dt = dt
        self.state_dim = system.state_dim
        self.control_dims = tuple(system.control_dims)

    def step(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        f, h = self.system.deriv, self.dt
        k1 = f(x, controls)
        k2 = f(x + 0.5 * h * k1, controls)
        k3 = f(x + 0.5 * h * k2, controls)
        k4 = f(x + h * k3, controls)
        return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_with_sensitivities(
        self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]
    ) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
        f, jac, h = self.system.deriv, self.system.jacobians, self.dt
        eye = np.eye(self.state_dim)
        stage_x = [x]
        slopes: List[np.ndarray] = []
        dx: List[np.ndarray] = []
        du: List[List[np.ndarray]] = []
        weights = (0.5 * h, 0.5 * h, h)
        for s in range(4):
            xs = stage_x[s]
            fs = f(xs, controls)
            fx, fus = jac(xs, controls)
            if s == 0:
                dx.append(fx)
                du.append([np.array(fu) for fu in fus])
            else:
                c = weights[s - 1]
                dx.append(fx @ (eye + c * dx[-1]))
                du.append([fx @ (c * prev) + fu for prev, fu in zip(du[-1], fus)])
            slopes.append(fs)
            if s < 3:
                stage_x.append(x + weights[s] * fs)
        x_next = x + h / 6.0 * (slopes[0] + 2.0 * slopes[1] + 2.0 * slopes[2] + slopes[3])
        a = eye + h / 6.0 * (dx[0] + 2.0 * dx[1] + 2.0 * dx[2] + dx[3])
        bs = [h / 6.0 * (d0 + 2.0 * d1 + 2.0 * d2 + d3) for d0, d1, d2, d3 in zip(*du)]
        return x_next, a, bs

    def linearize(self, k: int, x: np.ndarray, controls: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
        _, a, bs = self.step_with_sensitivities(k, x, controls)
        return a, bs


def discretize(system: ContinuousSystem, dt: float, method: str = "rk4") -> DiscreteDynamics:
    if dt <= 0:
        raise ConfigurationError(f"Sampling time must be positive, got {dt}")
    if method == "rk4":
        return RK4Dynamics(system, dt)
    if method == "exact-linear":
        if not isinstance(system, LinearContinuousSystem):
            raise ConfigurationError("exact-linear discretization requires a linear system")
        return LinearDiscreteDynamics.from_matrices(system.matrices.discretized(dt))
    raise ConfigurationError(f"Unknown discretization method '{method}'. Use 'rk4' or 'exact-linear'")


def finite_difference_sensitivities(
    dynamics: DiscreteDynamics,
    k: int,
    x: np.ndarray,
    controls: Sequence[np.ndarray],
    eps: float = 1e-6,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Central differences of the one-step map; validation path for ``linearize``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    a = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        a[:, j] = (dynamics.step(k, x + e, controls) - dynamics.step(k, x - e, controls)) / (2 * eps)
    bs = []
    for i, ui in enumerate(controls):
        b = np.zeros((n, ui.size))
        for j in range(ui.size):
            e = np.zeros(ui.size)
            e[j] = eps
            plus = list(controls)
            minus = list(controls)
            plus[i] = ui + e
            minus[i] = ui - e
            b[:, j] = (dynamics.step(k, x, plus) - dynamics.step(k, x, minus)) / (2 * eps)
        bs.append(b)
    return a, bs
