from typing import Any, Optional, Sequence

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class GameError(Exception):
    """Base error. ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context = context

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "detail": self.detail, **self.context}


class ConfigurationError(GameError, ValueError):
    exit_code = EXIT_USAGE


class UnknownSystemError(ConfigurationError):
    def __init__(self, name: str, available: Sequence[str]):
        super().__init__(
            f"System '{name}' not found. Available systems: {list(available)}",
            system=name,
        )


class DimensionMismatchError(GameError, ValueError):
    """Array shapes disagree with the game; names the player and/or time step."""

    exit_code = EXIT_USAGE

    def __init__(
        self,
        detail: str,
        player: Optional[int] = None,
        step: Optional[int] = None,
    ):
        super().__init__(detail, player=player, step=step)
        self.player = player
        self.step = step


class TrajectoryFormatError(GameError, ValueError):
    exit_code = EXIT_USAGE

    def __init__(self, detail: str, line: int, column: Optional[str] = None):
        super().__init__(f"line {line}: {detail}", line=line, column=column)
        self.line = line
        self.column = column


class DivergenceError(GameError, ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"Non-finite state at step {step}", step=step)
        self.step = step


class SolverError(GameError, ArithmeticError):
    def __init__(self, detail: str, residuals: Optional[Sequence[float]] = None):
        super().__init__(detail, residuals=list(residuals or []))
        self.residuals = list(residuals or [])


class SingularRecursionError(SolverError):
    def __init__(self, step: int):
        super().__init__(f"Singular coupled recursion at step {step}")
        self.step = step
        self.context["step"] = step


class RankDeficiencyError(GameError, ArithmeticError):
    def __init__(self, rank: int, dimension: int):
        super().__init__(
            f"State data spans {rank} of {dimension} dimensions; "
            f"{dimension - rank}-dimensional subspace is not excited",
            rank=rank,
            deficient_dimension=dimension - rank,
        )
        self.deficient_dimension = dimension - rank


class NormalizationError(GameError, ValueError):
    def __init__(self, channel: str):
        super().__init__(f"Reference channel '{channel}' is identically zero", channel=channel)
        self.channel = channel


class NotPositiveDefiniteError(GameError, ArithmeticError):
    pass
