"""Trajectory CSV files: ``k,t,x1..xn,u1_1..uN_mN`` with one row per sample."""
import csv
import io
import re
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import structlog

from app.core.exceptions import TrajectoryFormatError
from app.models.trajectory import Trajectory
from app.repositories.base import atomic_write

logger = structlog.get_logger(__name__)

_STATE = re.compile(r"^x(\d+)$")
_CONTROL = re.compile(r"^u(\d+)_(\d+)$")


def header(traj: Trajectory) -> List[str]:
    names = ["k", "t"] + [f"x{j + 1}" for j in range(traj.state_dim)]
    for i, m in enumerate(traj.control_dims):
        names.extend(f"u{i + 1}_{c + 1}" for c in range(m))
    return names


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def dumps_trajectory(traj: Trajectory, dt: float) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header(traj))
    stages = traj.joint_stages()
    for k, row in enumerate(stages):
        writer.writerow([str(k + 1), _fmt(k * dt)] + [_fmt(float(v)) for v in row])
    return buffer.getvalue()


def _columns(names: Sequence[str]) -> Tuple[List[int], Dict[int, List[int]]]:
    """Column positions of the states and of each player's controls, validated for contiguity."""
    if list(names[:2]) != ["k", "t"]:
        raise TrajectoryFormatError("header must start with 'k,t'", line=1, column=names[0] if names else None)
    states: Dict[int, int] = {}
    controls: Dict[int, Dict[int, int]] = {}
    for pos, name in enumerate(names[2:], start=2):
        if m := _STATE.match(name):
            states[int(m.group(1))] = pos
        elif m := _CONTROL.match(name):
            controls.setdefault(int(m.group(1)), {})[int(m.group(2))] = pos
        else:
            raise TrajectoryFormatError(f"unknown column '{name}'", line=1, column=name)
    if sorted(states) != list(range(1, len(states) + 1)) or not states:
        raise TrajectoryFormatError("state columns must be x1..xn", line=1, column="x")
    if sorted(controls) != list(range(1, len(controls) + 1)) or not controls:
        raise TrajectoryFormatError("control columns must cover players 1..N", line=1, column="u")
    per_player = {}
    for i, chans in controls.items():
        if sorted(chans) != list(range(1, len(chans) + 1)):
            raise TrajectoryFormatError(f"control columns of player {i} must be u{i}_1..", line=1, column=f"u{i}")
        per_player[i] = [chans[c] for c in sorted(chans)]
    return [states[j] for j in sorted(states)], per_player


def loads_trajectory(text: str) -> Tuple[Trajectory, float]:
    """Parse CSV text into a trajectory and the sampling time implied by the ``t`` column."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise TrajectoryFormatError("empty file", line=1)
    names = [c.strip() for c in rows[0]]
    state_cols, control_cols = _columns(names)
    data = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names):
            missing = names[len(row)] if len(row) < len(names) else None
            raise TrajectoryFormatError(f"expected {len(names)} fields, found {len(row)}", line=line, column=missing)
        values = []
        for name, cell in zip(names, row):
            try:
                values.append(float(cell))
            except ValueError as e:
                raise TrajectoryFormatError(f"'{cell}' is not a number", line=line, column=name) from e
        if values[0] != len(data) + 1:
            raise TrajectoryFormatError(f"sample index {row[0]!r} out of sequence", line=line, column="k")
        data.append(values)
    if len(data) < 2:
        raise TrajectoryFormatError("at least two samples are required", line=len(rows) + 1)
    table = np.array(data)
    traj = Trajectory(
        states=table[:, state_cols],
        controls=tuple(table[:, control_cols[i]] for i in sorted(control_cols)),
    )
    dt = float(table[1, 1] - table[0, 1])
    return traj, dt


class TrajectoryRepository:
    """Reads and writes trajectory CSV files atomically."""

    def __init__(self, dt: float):
        self.dt = dt

    def save(self, path: Union[str, Path], traj: Trajectory) -> Path:
        written = atomic_write(path, dumps_trajectory(traj, self.dt).encode())
        logger.debug("Wrote trajectory", path=str(written), samples=traj.horizon)
        return written

    def load(self, path: Union[str, Path]) -> Trajectory:
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError as e:
            raise TrajectoryFormatError(f"file '{path}' not found", line=0) from e
        traj, _ = loads_trajectory(text)
        return traj
