"""Two-player ball-on-beam benchmark: both players apply a torque to the beam.

State x = [s, s_dot, alpha, alpha_dot] (ball position on the beam, its velocity,
beam angle, beam angular velocity).
"""
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import Field

from app.core.config import Settings
from app.models.base import FrozenModel
from app.models.dynamics import ContinuousSystem
from app.systems.linear import LinearGameMatrices


class BallOnBeamParams(FrozenModel):
    g: float = Field(9.81, gt=0, description="Gravity (m/s^2)")
    m_b: float = Field(0.02, gt=0, description="Ball mass (kg)")
    r_b: float = Field(0.025, gt=0, description="Ball radius (m)")
    theta_b: float = Field(5e-6, gt=0, description="Ball inertia (kg m^2)")
    theta_p: float = Field(0.667, gt=0, description="Beam inertia (kg m^2)")

    @classmethod
    def from_settings(cls, config: Settings) -> "BallOnBeamParams":
        return cls(g=config.g, m_b=config.m_b, r_b=config.r_b, theta_b=config.theta_b, theta_p=config.theta_p)

    @property
    def rolling_gain(self) -> float:
        return self.m_b * self.r_b**2 / (self.theta_b + self.m_b * self.r_b**2)


def ball_on_beam_deriv(x: np.ndarray, u1: float, u2: float, p: BallOnBeamParams) -> np.ndarray:
    x1, x2, x3, x4 = x
    den = p.m_b * x1**2 + p.theta_p
    return np.array(
        [
            x2,
            p.rolling_gain * (x1 * x4**2 - p.g * np.sin(x3)),
            x4,
            (-2.0 * p.m_b * x1 * x2 * x4 - p.m_b * p.g * x1 * np.cos(x3) + u1 + u2) / den,
        ]
    )


def ball_on_beam_jacobian(x: np.ndarray, u1: float, u2: float, p: BallOnBeamParams) -> Tuple[np.ndarray, np.ndarray]:
    """Return (df/dx, df/du) where df/du is the common torque column."""
    x1, x2, x3, x4 = x
    c = p.rolling_gain
    den = p.m_b * x1**2 + p.theta_p
    num = -2.0 * p.m_b * x1 * x2 * x4 - p.m_b * p.g * x1 * np.cos(x3) + u1 + u2
    fx = np.zeros((4, 4))
    fx[0, 1] = 1.0
    fx[1, 0] = c * x4**2
    fx[1, 2] = -c * p.g * np.cos(x3)
    fx[1, 3] = 2.0 * c * x1 * x4
    fx[2, 3] = 1.0
    fx[3, 0] = (-2.0 * p.m_b * x2 * x4 - p.m_b * p.g * np.cos(x3)) / den - num * 2.0 * p.m_b * x1 / den**2
    fx[3, 1] = -2.0 * p.m_b * x1 * x4 / den
    fx[3, 2] = p.m_b * p.g * x1 * np.sin(x3) / den
    fx[3, 3] = -2.0 * p.m_b * x1 * x2 / den
    fu = np.array([0.0, 0.0, 0.0, 1.0 / den])
    return fx, fu


class BallOnBeam(ContinuousSystem):
    state_dim = 4
    control_dims = (1, 1)

    def __init__(self, params: BallOnBeamParams):
        self.params = params

    def deriv(self, x: np.ndarray, controls: Sequence[np.ndarray]) -> np.ndarray:
        return ball_on_beam_deriv(x, float(controls[0][0]), float(controls[1][0]), self.params)

    def jacobians(self, x: np.ndarray, controls: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
        fx, fu = ball_on_beam_jacobian(x, float(controls[0][0]), float(controls[1][0]), self.params)
        col = fu.reshape(4, 1)
        return fx, [col, col.copy()]


def linearize_ball_on_beam(p: BallOnBeamParams) -> LinearGameMatrices:
    """Jacobian of the vector field at the origin."""
    a = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, -p.r_b**2 * p.m_b * p.g / (p.theta_b + p.m_b * p.r_b**2), 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [-p.m_b * p.g / p.theta_p, 0.0, 0.0, 0.0],
        ]
    )
    b = np.array([[0.0], [0.0], [0.0], [1.0 / p.theta_p]])
    return LinearGameMatrices(a=a, b=(b, b.copy()))
