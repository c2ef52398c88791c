import csv
import io
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import structlog

from app.api.schemas import snr_label
from app.models.results import ExperimentBundle, GridCell, IdentificationResult
from app.repositories.base import atomic_write, dumps
from app.repositories.trajectory import TrajectoryRepository

logger = structlog.get_logger(__name__)


def _pair(cell: GridCell) -> str:
    if cell.e_x is None or cell.e_u is None:
        return "failed"
    return f"{cell.e_x:.6g}/{cell.e_u:.6g}"


def grid_csv(bundle: ExperimentBundle) -> str:
    """Pipelines as rows, SNR levels as columns, ``e_x/e_u`` per entry."""
    levels: List[float] = []
    for cell in bundle.grid:
        if cell.snr_db not in levels:
            levels.append(cell.snr_db)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["concept"] + [snr_label(s) for s in levels])
    pipelines: List[str] = []
    for cell in bundle.grid:
        if cell.pipeline not in pipelines:
            pipelines.append(cell.pipeline)
    for pipeline in pipelines:
        row = {c.snr_db: c for c in bundle.grid if c.pipeline == pipeline}
        writer.writerow([pipeline] + [_pair(row[s]) for s in levels])
    return buffer.getvalue()


class ResultsRepository:
    """Writes command outputs and experiment bundles under one directory."""

    def __init__(self, root: Union[str, Path], dt: float):
        self.root = Path(root)
        self.trajectories = TrajectoryRepository(dt)

    def write_json(self, name: str, payload: Any) -> Path:
        path = atomic_write(self.root / name, dumps(payload))
        logger.info("Wrote results", path=str(path))
        return path

    def write_identification(self, name: str, result: IdentificationResult, config: Mapping[str, Any]) -> Path:
        payload = result.model_dump(mode="python")
        payload["fixed"] = [
            {"player": fw.player + 1, "index": fw.index + 1, "value": fw.value} for fw in result.fixed
        ]
        payload["players"] = [p + 1 for p in result.players]
        payload["config"] = dict(config)
        return self.write_json(name, payload)

    def write_bundle(self, bundle: ExperimentBundle, reference: Optional[Dict[str, Any]] = None) -> Path:
        """params_<concept>.json, nmae_grid.csv, per-cell CSVs and summary.json."""
        reference = reference or {}
        for pipeline, traj in bundle.references.items():
            self.trajectories.save(self.root / "trajectories" / f"{pipeline.lower()}_reference.csv", traj)
        for cell in bundle.cells:
            if cell.estimated is not None:
                name = f"{cell.pipeline.lower()}_snr-{snr_label(cell.snr_db)}_r{cell.replicate}.csv"
                self.trajectories.save(self.root / "trajectories" / name, cell.estimated)

        for pipeline in bundle.references:
            rows = [
                {
                    "snr_db": c.snr_db,
                    "replicate": c.replicate,
                    "seed": c.seed,
                    "ok": c.ok,
                    "converged": c.converged,
                    "theta": {f"theta{i + 1}": t for i, t in enumerate(c.theta)},
                    "error": c.error,
                }
                for c in bundle.cells
                if c.pipeline == pipeline
            ]
            self.write_json(
                f"params_{pipeline.lower()}.json",
                {
                    "concept": pipeline,
                    "estimates": rows,
                    "reference": reference.get("parameters", {}).get(pipeline),
                    "true": reference.get("true_parameters"),
                    "config": bundle.config,
                },
            )

        atomic_write(self.root / "nmae_grid.csv", grid_csv(bundle).encode())
        summary = {
            "passed": bundle.passed,
            "checks": [c.model_dump(mode="python") for c in bundle.checks],
            "grid": [g.model_dump(mode="python") for g in bundle.grid],
            "failed_cells": [
                {"concept": c.pipeline, "snr_db": c.snr_db, "replicate": c.replicate, "error": c.error}
                for c in bundle.cells
                if not c.ok
            ],
            "reference": reference,
            "snr_convention": "per-channel RMS over the horizon",
            "config": bundle.config,
        }
        return self.write_json("summary.json", summary)
