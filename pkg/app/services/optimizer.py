"""Bounded quasi-Newton minimization (scipy L-BFGS-B) with a recorded trace."""
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.optimize import Bounds, minimize

from app.models.base import FrozenModel
from app.models.results import OptimizerTrace

logger = structlog.get_logger(__name__)

ValueAndGradient = Callable[[np.ndarray], Tuple[float, np.ndarray]]
Objective = Union[ValueAndGradient, Callable[[np.ndarray], float]]


class Solution(FrozenModel):
    x: Tuple[float, ...]
    value: float
    converged: bool
    iterations: int
    gradient_norm: float
    history: Tuple[float, ...] = ()
    message: str = ""

    def trace(self, log_likelihood: float, rationality: Optional[float] = None) -> OptimizerTrace:
        return OptimizerTrace(
            iterations=self.iterations,
            gradient_norm=self.gradient_norm,
            log_likelihood=log_likelihood,
            objective=self.value,
            rationality=rationality,
            history=self.history,
            message=self.message,
        )


def projected_gradient(x: np.ndarray, grad: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Zero the components that push an active lower bound further down."""
    out = np.array(grad, dtype=float)
    out[(x <= lower) & (out > 0.0)] = 0.0
    return out


def minimize_bounded(
    objective: Objective,
    x0: np.ndarray,
    lower: Optional[Sequence[float]] = None,
    jac: Union[bool, str] = True,
    tol: float = 1e-8,
    ftol: float = 1e-14,
    max_iterations: int = 500,
) -> Solution:
    """Minimize with L-BFGS-B under lower bounds.

    ``jac=True`` means ``objective`` returns (value, gradient); a finite-difference
    scheme name ("2-point", "3-point") means it returns the value only.
    """
    x0 = np.asarray(x0, dtype=float)
    low = np.full(x0.size, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    x0 = np.maximum(x0, low)
    history: List[float] = []

    def record(intermediate_result) -> None:
        history.append(float(intermediate_result.fun))

    res = minimize(
        objective,
        x0,
        method="L-BFGS-B",
        jac=jac,
        bounds=Bounds(low, np.full(x0.size, np.inf)),
        callback=record,
        options={"gtol": tol, "ftol": ftol, "maxiter": max_iterations},
    )
    grad = np.asarray(res.jac, dtype=float) if getattr(res, "jac", None) is not None else np.full(x0.size, np.nan)
    pg = projected_gradient(res.x, grad, low)
    gnorm = float(np.max(np.abs(pg), initial=0.0)) if np.all(np.isfinite(pg)) else math.inf
    converged = bool(res.success) and math.isfinite(float(res.fun))
    message = res.message.decode() if isinstance(res.message, bytes) else str(res.message)
    logger.info(
        "Minimization finished",
        converged=converged,
        iterations=int(res.nit),
        gradient_norm=gnorm,
        value=float(res.fun),
        message=message,
    )
    return Solution(
        x=tuple(float(v) for v in res.x),
        value=float(res.fun),
        converged=converged,
        iterations=int(res.nit),
        gradient_norm=gnorm,
        history=tuple(history),
        message=message,
    )
