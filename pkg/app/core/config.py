from typing import Literal

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Application
    env: Literal["dev", "stg", "prod"] = "dev"

    # Logging
    log_level: str = "INFO"

    # Time grid
    dt: float = Field(0.02, gt=0, description="Sampling time in seconds")
    horizon_seconds: float = Field(5.0, gt=0, description="Experiment duration")

    # Ball-on-beam parameters
    g: float = Field(9.81, gt=0)
    m_b: float = Field(0.02, gt=0)
    r_b: float = Field(0.025, gt=0)
    theta_b: float = Field(5e-6, gt=0)
    theta_p: float = Field(0.667, gt=0)

    # Forward solvers
    tol_opt: float = 1e-8
    max_solver_iterations: int = 200
    nash_sweeps: int = 20
    riccati_tol: float = 1e-10
    riccati_max_steps: int = 10_000

    # Identification
    tol_mle: float = 1e-8
    max_mle_iterations: int = 500
    mle_gradient: Literal["analytic", "central"] = "analytic"
    mle_scale: Literal["profile", "fixed"] = "profile"
    mle_ftol: float = Field(1e-14, gt=0, description="Relative objective reduction that stops the optimizer")
    d_variant: Literal["plain", "trapezoid"] = "plain"
    condition_limit: float = 1e12

    # Trajectories
    feasibility_tol: float = 1e-9

    # Experiments
    workers: int = Field(1, ge=1)

    @field_validator("log_level", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        return str(v).upper()

    @property
    def horizon(self) -> int:
        """Number of samples k_E covering ``horizon_seconds`` inclusive of t = 0."""
        return int(round(self.horizon_seconds / self.dt)) + 1

    model_config = {
        "env_file": ".env",
        "env_prefix": "IDG_",
        "case_sensitive": False,
    }


settings = Settings()
