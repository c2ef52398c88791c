import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from app.core.config import Settings
from app.core.exceptions import ConfigurationError
from app.models.game import CostParameters, FixedWeight
from app.models.results import DVariant
from app.systems.registry import BenchmarkSystem, control_effort_weights, lq_game_from_document, registry

DEFAULT_SNR = [15.0, 20.0, 25.0, 30.0, math.inf]
PIPELINE_NAMES = ("CG", "NOLN", "LOLN", "FB")
LQ_ONLY_KEYS = ("A", "B", "discrete", "name")
LQ_SHARED_KEYS = ("theta", "dt", "horizon", "x1")

_CONCEPT_ALIASES = {
    "cg": "cg",
    "cooperative": "cg",
    "pareto": "cg",
    "ol-nash": "ol-nash",
    "olnash": "ol-nash",
    "ol": "ol-nash",
    "open-loop": "ol-nash",
    "fb-nash": "fb-nash",
    "fbnash": "fb-nash",
    "fb": "fb-nash",
    "feedback": "fb-nash",
}


def parse_snr(value: Any) -> float:
    if isinstance(value, str):
        text = value.strip().lower()
        if text in {"inf", "infinity", "∞", "+inf"}:
            return math.inf
        try:
            return float(text)
        except ValueError as e:
            raise ValueError(f"Invalid SNR '{value}'") from e
    return float(value)


def snr_label(snr_db: float) -> str:
    return "inf" if math.isinf(snr_db) else f"{snr_db:g}"


def parse_fixed_weight(spec: str) -> FixedWeight:
    """``player=1,index=5,value=2.0`` (1-based player and index) -> FixedWeight."""
    fields: Dict[str, str] = {}
    for part in spec.split(","):
        if "=" not in part:
            raise ValueError(f"Invalid fixed-weight entry '{part}' in '{spec}'")
        key, value = part.split("=", 1)
        fields[key.strip().lower()] = value.strip()
    try:
        player, index, value = int(fields["player"]), int(fields["index"]), float(fields["value"])
    except KeyError as e:
        raise ValueError(f"Fixed-weight spec '{spec}' is missing {e}") from e
    if player < 1 or index < 1:
        raise ValueError(f"Fixed-weight player and index are 1-based, got '{spec}'")
    return FixedWeight(player=player - 1, index=index - 1, value=value)


def format_fixed_weight(fw: FixedWeight) -> str:
    return f"player={fw.player + 1},index={fw.index + 1},value={fw.value!r}"


class ExperimentConfig(BaseModel):
    """Resolved experiment description shared by every subcommand."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    system: str = "ball-on-beam"
    lq: Optional[Dict[str, Any]] = Field(None, description="Inline LQ game (A, B, theta, dt, horizon)")
    concept: str = "cg"
    theta: Optional[List[List[float]]] = None
    x1: Optional[List[float]] = None
    dt: Optional[float] = Field(None, gt=0)
    horizon: Optional[int] = Field(None, ge=2, description="Number of samples k_E")
    fixed: List[FixedWeight] = Field(default_factory=list)
    d_variant: Optional[DVariant] = None
    snr: List[float] = Field(default_factory=lambda: list(DEFAULT_SNR))
    seed: int = Field(0, ge=0)
    seeds: int = Field(20, ge=1, description="Noise realizations per cell")
    pipelines: List[str] = Field(default_factory=lambda: list(PIPELINE_NAMES))
    workers: Optional[int] = Field(None, ge=1)
    feature_samples: int = Field(2_000, ge=0)
    mle_scale: Optional[Literal["profile", "fixed"]] = None
    allow_nonconverged: bool = False
    out: Path = Path("results")

    @model_validator(mode="before")
    @classmethod
    def bare_lq_document(cls, data):
        """A top-level LQ game (A and B next to theta) is read as the inline ``lq`` entry."""
        if not isinstance(data, dict) or "lq" in data or not {"A", "B"} <= set(data):
            return data
        data = dict(data)
        lq = {k: data.pop(k) for k in LQ_ONLY_KEYS if k in data}
        lq.update({k: data[k] for k in LQ_SHARED_KEYS if k in data})
        data["lq"] = lq
        return data

    @field_validator("concept", mode="before")
    @classmethod
    def concept_alias(cls, v):
        key = str(v).strip().lower()
        if key not in _CONCEPT_ALIASES:
            raise ValueError(f"Unknown concept '{v}'. Use cg, ol-nash or fb-nash")
        return _CONCEPT_ALIASES[key]

    @field_validator("snr", mode="before")
    @classmethod
    def snr_list(cls, v):
        if isinstance(v, (str, int, float)):
            v = str(v).split(",")
        return [parse_snr(s) for s in v]

    @field_validator("snr")
    @classmethod
    def snr_values(cls, v):
        if not v:
            raise ValueError("At least one SNR level is required")
        if any(math.isnan(s) for s in v):
            raise ValueError("SNR must be a number or inf")
        return v

    @field_validator("fixed", mode="before")
    @classmethod
    def fixed_specs(cls, v):
        return [parse_fixed_weight(item) if isinstance(item, str) else item for item in v]

    @field_validator("pipelines", mode="before")
    @classmethod
    def pipeline_names(cls, v):
        if isinstance(v, str):
            v = v.split(",")
        names = [str(p).strip().upper() for p in v if str(p).strip()]
        unknown = [p for p in names if p not in PIPELINE_NAMES]
        if unknown:
            raise ValueError(f"Unknown pipelines {unknown}. Use {list(PIPELINE_NAMES)}")
        return names

    @field_serializer("snr")
    def snr_labels(self, v: List[float]) -> List[str]:
        return [snr_label(s) for s in v]

    @field_serializer("out")
    def out_path(self, v: Path) -> str:
        return str(v)

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> "ExperimentConfig":
        """Merge defaults, the JSON document at ``path`` and non-None ``overrides``, in that order."""
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                data = orjson.loads(Path(path).read_bytes())
            except FileNotFoundError as e:
                raise ConfigurationError(f"Config file '{path}' not found") from e
            except orjson.JSONDecodeError as e:
                raise ConfigurationError(f"Config file '{path}' is not valid JSON: {e}") from e
            if not isinstance(data, dict):
                raise ConfigurationError(f"Config file '{path}' must contain a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls.model_validate(data)
        except ValueError as e:
            raise ConfigurationError(f"Invalid experiment configuration: {e}") from e

    def resolved_settings(self, base: Settings) -> Settings:
        update: Dict[str, Any] = {}
        dt = self.dt or (self.lq or {}).get("dt") or base.dt
        update["dt"] = float(dt)
        if self.horizon is not None:
            update["horizon_seconds"] = (self.horizon - 1) * float(dt)
        if self.d_variant is not None:
            update["d_variant"] = self.d_variant
        if self.workers is not None:
            update["workers"] = self.workers
        if self.mle_scale is not None:
            update["mle_scale"] = self.mle_scale
        return base.model_copy(update=update)

    def build_system(self, config: Settings) -> BenchmarkSystem:
        """Registry system (or the inline LQ game) with theta and x1 overrides applied."""
        if self.lq is not None:
            doc = dict(self.lq)
            doc.setdefault("horizon", config.horizon)
            system = lq_game_from_document(doc, config)
        else:
            system = registry.get(self.system, config)
        update: Dict[str, Any] = {}
        if self.theta is not None:
            dims = system.game.feature_dims
            if len(self.theta) != len(dims) or any(len(t) != d for t, d in zip(self.theta, dims)):
                raise ConfigurationError(f"theta must provide {list(dims)} weights per player")
            theta = CostParameters.from_lists(self.theta)
            update["theta"] = theta.model_copy(
                update={"fixed": control_effort_weights(theta.theta, system.game.state_dim)}
            )
        if self.x1 is not None:
            if len(self.x1) != system.game.state_dim:
                raise ConfigurationError(f"x1 must have {system.game.state_dim} entries")
            update["x1"] = np.asarray(self.x1, dtype=float)
        return system.model_copy(update=update) if update else system

    def fixed_weights(self, system: BenchmarkSystem) -> Sequence[FixedWeight]:
        return tuple(self.fixed) if self.fixed else system.theta.fixed

    def echo(self) -> Dict[str, Any]:
        data = self.model_dump(mode="json")
        data["fixed"] = [format_fixed_weight(fw) for fw in self.fixed]
        return data
