from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.config import Settings, settings as default_settings
from app.core.exceptions import ConfigurationError, UnknownSystemError
from app.models.base import Array, FrozenModel
from app.models.game import CostParameters, FixedWeight, GameDefinition, QuadraticFeature
from app.systems.ball_on_beam import BallOnBeam, BallOnBeamParams, linearize_ball_on_beam
from app.systems.discretize import discretize
from app.systems.linear import LinearContinuousSystem, LinearDiscreteDynamics, LinearGameMatrices

logger = structlog.get_logger(__name__)

BALL_ON_BEAM_THETA = ([20.0, 1.0, 1.0, 1.0, 2.0], [1.0, 1.0, 10.0, 1.0, 1.0])
BALL_ON_BEAM_X1 = [0.5, 0.0, 0.0, 0.0]


def standard_features(state_dim: int, control_dims: Sequence[int]) -> Tuple[Tuple[QuadraticFeature, ...], ...]:
    """eta_i = -[x_1^2, ..., x_n^2, u_i1^2, ..., u_im_i^2] for every player i."""
    dim = state_dim + sum(control_dims)
    state = tuple(QuadraticFeature.negated_square(j, dim, f"x{j + 1}^2") for j in range(state_dim))
    sets = []
    offset = state_dim
    for i, m in enumerate(control_dims):
        own = tuple(QuadraticFeature.negated_square(offset + l, dim, f"u{i + 1}_{l + 1}^2") for l in range(m))
        sets.append(state + own)
        offset += m
    return tuple(sets)


def control_effort_weights(theta: Sequence[np.ndarray], state_dim: int) -> Tuple[FixedWeight, ...]:
    """Fix each player's first own-control weight at its given value."""
    return tuple(FixedWeight(player=i, index=state_dim, value=float(t[state_dim])) for i, t in enumerate(theta))


class BenchmarkSystem(FrozenModel):
    """A game together with its reference parameters and initial state."""

    game: GameDefinition
    theta: CostParameters
    x1: Array
    linear: Optional[LinearGameMatrices] = None

    @property
    def is_linear(self) -> bool:
        return self.linear is not None


def ball_on_beam(config: Settings, params: Optional[BallOnBeamParams] = None) -> BenchmarkSystem:
    params = params or BallOnBeamParams.from_settings(config)
    dynamics = discretize(BallOnBeam(params), config.dt, "rk4")
    game = GameDefinition(
        name="ball-on-beam",
        state_dim=4,
        control_dims=(1, 1),
        horizon=config.horizon,
        dt=config.dt,
        dynamics=dynamics,
        features=standard_features(4, (1, 1)),
    )
    theta = [np.array(t) for t in BALL_ON_BEAM_THETA]
    return BenchmarkSystem(
        game=game,
        theta=CostParameters(theta=tuple(theta), fixed=control_effort_weights(theta, 4)),
        x1=np.array(BALL_ON_BEAM_X1),
    )


def ball_on_beam_lq(config: Settings, params: Optional[BallOnBeamParams] = None) -> BenchmarkSystem:
    params = params or BallOnBeamParams.from_settings(config)
    lin = linearize_ball_on_beam(params).discretized(config.dt)
    dynamics = discretize(LinearContinuousSystem(lin), config.dt, "exact-linear")
    game = GameDefinition(
        name="ball-on-beam-lq",
        state_dim=4,
        control_dims=(1, 1),
        horizon=config.horizon,
        dt=config.dt,
        dynamics=dynamics,
        features=standard_features(4, (1, 1)),
    )
    theta = [np.array(t) for t in BALL_ON_BEAM_THETA]
    return BenchmarkSystem(
        game=game,
        theta=CostParameters(theta=tuple(theta), fixed=control_effort_weights(theta, 4)),
        x1=np.array(BALL_ON_BEAM_X1),
        linear=lin,
    )


def lq_game_from_document(doc: Mapping[str, Any], config: Settings) -> BenchmarkSystem:
    """Custom LQ game: ``A``, ``B`` (one matrix per player), ``theta``, ``dt``, ``horizon``.

    Optional keys: ``x1`` (initial state, default ones) and ``discrete`` (A/B are
    already discrete-time; default false).
    """
    try:
        a = np.asarray(doc["A"], dtype=float)
        bs = [np.asarray(b, dtype=float).reshape(a.shape[0], -1) for b in doc["B"]]
        theta = [np.asarray(t, dtype=float) for t in doc["theta"]]
        dt = float(doc.get("dt", config.dt))
        horizon = int(doc.get("horizon", config.horizon))
    except KeyError as e:
        raise ConfigurationError(f"LQ game document is missing field {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"LQ game document is malformed: {e}") from e
    if len(bs) != len(theta):
        raise ConfigurationError("LQ game needs one B and one theta per player")
    n = a.shape[0]
    control_dims = tuple(b.shape[1] for b in bs)
    for i, (t, m) in enumerate(zip(theta, control_dims)):
        if t.shape != (n + m,):
            raise ConfigurationError(f"theta of player {i + 1} must have {n + m} entries (states then own controls)")
    if doc.get("discrete", False):
        lin = LinearGameMatrices.from_discrete(a, bs, dt)
    else:
        lin = LinearGameMatrices(a=a, b=tuple(bs)).discretized(dt)
    game = GameDefinition(
        name=str(doc.get("name", "custom-lq")),
        state_dim=n,
        control_dims=control_dims,
        horizon=horizon,
        dt=dt,
        dynamics=LinearDiscreteDynamics.from_matrices(lin),
        features=standard_features(n, control_dims),
    )
    x1 = np.asarray(doc.get("x1", np.ones(n)), dtype=float)
    return BenchmarkSystem(
        game=game,
        theta=CostParameters(theta=tuple(theta), fixed=control_effort_weights(theta, n)),
        x1=x1,
        linear=lin,
    )


class SystemRegistry:
    """Name-addressable benchmark systems."""

    def __init__(self):
        self.factories: Dict[str, Callable[..., BenchmarkSystem]] = {}

    def register(self, name: str, factory: Callable[..., BenchmarkSystem]) -> None:
        self.factories[name] = factory
        logger.debug("Registered system", name=name)

    def names(self) -> List[str]:
        return sorted(self.factories)

    def get(self, name: str, config: Optional[Settings] = None, params: Optional[BallOnBeamParams] = None) -> BenchmarkSystem:
        if name not in self.factories:
            raise UnknownSystemError(name, self.names())
        return self.factories[name](config or default_settings, params)


registry = SystemRegistry()
registry.register("ball-on-beam", ball_on_beam)
registry.register("ball-on-beam-lq", ball_on_beam_lq)
