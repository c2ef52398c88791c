import math
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import Field, field_validator, model_validator

from app.models.base import Array, FrozenModel
from app.models.game import FixedWeight
from app.models.trajectory import Trajectory

Scope = Literal["joint", "player"]
DVariant = Literal["plain", "trapezoid"]
ConceptTag = Literal["CG", "OL-Nash", "FB-Nash"]


class SolverReport(FrozenModel):
    converged: bool
    iterations: int = 0
    residual: float = Field(..., description="Terminal gradient or residual norm")
    objective: Optional[float] = None
    tolerance: float = 0.0
    diagnostics: Dict[str, float] = Field(default_factory=dict)


class FeedbackGains(FrozenModel):
    """Per-player gains K_i with u_i = K_i x.

    Each entry is (m_i, n) for a stationary law or (k_E, m_i, n) for a
    time-varying one.
    """

    gains: Tuple[Array, ...]

    @field_validator("gains")
    @classmethod
    def matrices(cls, v):
        for i, g in enumerate(v):
            if g.ndim not in (2, 3):
                raise ValueError(f"gain of player {i} must be 2-D or 3-D")
        return v

    @property
    def stationary(self) -> bool:
        return all(g.ndim == 2 for g in self.gains)

    def gain(self, player: int, k: int) -> np.ndarray:
        g = self.gains[player]
        return g if g.ndim == 2 else g[min(k, g.shape[0] - 1)]


class PlayerDeviation(FrozenModel):
    player: int
    cost: float
    best_response_cost: float
    improvement: float = Field(..., description="Achievable cost decrease delta_i")
    certified: bool
    inner_converged: bool


class NashCheckReport(FrozenModel):
    concept: Literal["open-loop", "feedback"]
    tolerance: float
    players: Tuple[PlayerDeviation, ...]

    @property
    def is_nash(self) -> bool:
        return all(p.certified for p in self.players)


class ControlJacobian(FrozenModel):
    """D = (dx/du)^T for one control scope: (m * k_E) x (n * k_E), block (k1, k2) = (dx^(k2)/du^(k1))^T."""

    players: Tuple[int, ...]
    variant: DVariant
    matrix: Array

    def block(self, k1: int, k2: int, m: int, n: int) -> np.ndarray:
        return self.matrix[k1 * m:(k1 + 1) * m, k2 * n:(k2 + 1) * n]


class QuadraticLikelihoodModel(FrozenModel):
    """Gradient g, Hessian G and the Gaussian log-density at one demonstration."""

    scope: Scope
    players: Tuple[int, ...]
    gradient: Array
    hessian: Array
    log_density: float
    condition: float = math.inf
    warnings: Tuple[str, ...] = ()


class OptimizerTrace(FrozenModel):
    iterations: int
    gradient_norm: float
    log_likelihood: float
    objective: Optional[float] = None
    rationality: Optional[float] = Field(
        None, description="Estimated overall cost scale; None when it is fixed or unbounded"
    )
    history: Tuple[float, ...] = ()
    message: str = ""


class IdentificationResult(FrozenModel):
    scope: ConceptTag
    players: Tuple[int, ...]
    theta: Tuple[Array, ...] = Field(..., description="Estimated parameters, one vector per player in ``players``")
    stacked: Optional[Array] = None
    fixed: Tuple[FixedWeight, ...]
    converged: bool
    trace: OptimizerTrace
    d_variant: DVariant

    @model_validator(mode="after")
    def fixed_weights_exact(self):
        for fw in self.fixed:
            pos = self.players.index(fw.player)
            if self.theta[pos][fw.index] != fw.value:
                raise ValueError(f"Fixed weight {fw} not held exactly")
        return self

    @model_validator(mode="after")
    def finite_log_likelihood(self):
        if not math.isfinite(self.trace.log_likelihood):
            raise ValueError("Final log-likelihood must be finite")
        return self


class NoiseSpec(FrozenModel):
    snr_db: float = Field(math.inf, description="Signal-to-noise ratio in dB; inf means noiseless")
    seed: int = 0
    states: bool = True
    controls: bool = True

    @field_validator("snr_db", mode="before")
    @classmethod
    def parse_inf(cls, v):
        if isinstance(v, str) and v.strip().lower() in {"inf", "infinity", "∞"}:
            return math.inf
        return v

    @model_validator(mode="after")
    def not_nan(self):
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must be a number or inf")
        return self

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.snr_db) and self.snr_db > 0


class ErrorReport(FrozenModel):
    e_x: float = Field(..., ge=0)
    e_u: float = Field(..., ge=0)
    channels: Dict[str, float]


class FeatureMatchingReport(FrozenModel):
    keys: Tuple[str, ...]
    demonstrated: Array
    expected: Array
    relative_mismatch: Array
    free: Tuple[bool, ...]
    sample_count: int

    @property
    def max_free_mismatch(self) -> float:
        values: List[float] = [float(m) for m, f in zip(self.relative_mismatch, self.free) if f]
        return max(values) if values else 0.0


class DerivativeReport(FrozenModel):
    """Analytic cost derivatives against central differences over random control draws."""

    player: int
    draws: int
    gradient_error: float = Field(..., description="Largest directional-derivative error relative to |g|")
    quadratic_remainder: Optional[float] = Field(
        None, description="Largest relative remainder of the quadratic model; linear dynamics only"
    )


class NormalizationReport(FrozenModel):
    integral: float
    samples: int
    dim: int

    @property
    def error(self) -> float:
        return abs(self.integral - 1.0)


class CellOutcome(FrozenModel):
    """One (pipeline, SNR, realization) run: identify on the noisy demonstration, re-solve, compare."""

    pipeline: str
    snr_db: float
    replicate: int = 0
    seed: int
    ok: bool
    error: Optional[Dict[str, Any]] = None
    theta: Tuple[Array, ...] = ()
    rationality: Tuple[Optional[float], ...] = ()
    converged: bool = False
    nmae: Optional[ErrorReport] = None
    estimated: Optional[Trajectory] = None


class GridCell(FrozenModel):
    pipeline: str
    snr_db: float
    e_x: Optional[float] = None
    e_u: Optional[float] = None
    samples: int = 0


class AcceptanceCheck(FrozenModel):
    name: str
    passed: Optional[bool] = Field(None, description="None when the check could not be evaluated")
    detail: Dict[str, Any] = Field(default_factory=dict)


class ExperimentBundle(FrozenModel):
    config: Dict[str, Any]
    references: Dict[str, Trajectory]
    cells: Tuple[CellOutcome, ...]
    grid: Tuple[GridCell, ...]
    checks: Tuple[AcceptanceCheck, ...] = ()

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def cell(self, pipeline: str, snr_db: float, replicate: int = 0) -> Optional[CellOutcome]:
        return next(
            (c for c in self.cells if c.pipeline == pipeline and c.snr_db == snr_db and c.replicate == replicate),
            None,
        )
