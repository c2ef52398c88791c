from typing import Callable, Sequence

import numpy as np
import pytest

from app.core.config import Settings
from app.models.game import GameDefinition
from app.models.trajectory import Trajectory
from app.systems.linear import LinearDiscreteDynamics
from app.systems.registry import BenchmarkSystem, lq_game_from_document, standard_features


@pytest.fixture
def settings() -> Settings:
    """Default settings, isolated from any local .env file."""
    return Settings(_env_file=None)


@pytest.fixture
def short_settings() -> Settings:
    """One second of ball-on-beam at the default sampling time (51 samples)."""
    return Settings(_env_file=None, horizon_seconds=1.0)


@pytest.fixture
def scalar_lq(settings) -> Callable[..., BenchmarkSystem]:
    """Factory for the two-player scalar game x+ = a x + b1 u1 + b2 u2."""

    def build(
        horizon: int = 2,
        theta: Sequence[Sequence[float]] = ((1.0, 1.0), (1.0, 1.0)),
        a: float = 1.0,
        b: Sequence[float] = (1.0, 1.0),
        x1: float = 1.0,
    ) -> BenchmarkSystem:
        doc = {
            "name": "scalar",
            "A": [[a]],
            "B": [[[bi]] for bi in b],
            "theta": [list(t) for t in theta],
            "dt": 1.0,
            "horizon": horizon,
            "x1": [x1],
            "discrete": True,
        }
        return lq_game_from_document(doc, settings)

    return build


@pytest.fixture
def single_player_game() -> Callable[[int], GameDefinition]:
    """x+ = x + u with features -[x^2, u^2]."""

    def build(horizon: int = 2) -> GameDefinition:
        return GameDefinition(
            name="single",
            state_dim=1,
            control_dims=(1,),
            horizon=horizon,
            dt=1.0,
            dynamics=LinearDiscreteDynamics(np.array([[1.0]]), [np.array([[1.0]])]),
            features=standard_features(1, (1,)),
        )

    return build


@pytest.fixture
def single_player_demo() -> Trajectory:
    """Feasible for x+ = x + u: x = [1, 0.5], u = [-0.5, 0]."""
    return Trajectory.from_arrays(np.array([[1.0], [0.5]]), [np.array([[-0.5], [0.0]])])

