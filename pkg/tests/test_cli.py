import math

import numpy as np
import orjson
import pytest

from app.api.cli import main
from app.core.config import Settings
from app.models.results import AcceptanceCheck, ExperimentBundle, GridCell
from app.models.trajectory import Trajectory

SCALAR_GAME = {
    "A": [[1.0]],
    "B": [[[1.0]], [[1.0]]],
    "theta": [[2.0, 1.0], [1.0, 3.0]],
    "dt": 1.0,
    "x1": [1.0],
    "discrete": True,
}


@pytest.fixture
def base() -> Settings:
    return Settings(_env_file=None, log_level="WARNING")


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "scalar.json"
    path.write_bytes(orjson.dumps({"lq": SCALAR_GAME, "concept": "ol-nash", "horizon": 5}))
    return path


def _run(base, *argv) -> int:
    return main([str(a) for a in argv], base)


class TestForward:
    """Forward subcommand."""

    def test_writes_trajectory_and_report(self, base, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert _run(base, "forward", "--config", config_file, "--out", out, "--check-nash") == 0
        csv = (out / "trajectory_ol-nash.csv").read_text().splitlines()
        assert len(csv) == 6
        assert csv[0] == "k,t,x1,u1_1,u2_1"
        report = orjson.loads((out / "solver_report_ol-nash.json").read_bytes())
        assert report["report"]["converged"] is True
        assert report["nash_check"]["is_nash"] is True
        printed = orjson.loads(capsys.readouterr().out)
        assert printed["converged"] is True

    def test_fixed_weights_are_echoed(self, base, config_file, tmp_path):
        out = tmp_path / "out"
        code = _run(base, "forward", "--config", config_file, "--out", out, "--fix-weight", "player=1,index=2,value=1.0")
        assert code == 0
        report = orjson.loads((out / "solver_report_ol-nash.json").read_bytes())
        assert report["config"]["fixed"] == ["player=1,index=2,value=1.0"]

    def test_feedback_gains_reported(self, base, config_file, tmp_path):
        out = tmp_path / "out"
        assert _run(base, "forward", "--config", config_file, "--concept", "fb-nash", "--out", out) == 0
        report = orjson.loads((out / "solver_report_fb-nash.json").read_bytes())
        assert len(report["gains"]) == 2

    def test_feedback_check_uses_time_varying_gains(self, base, config_file, tmp_path):
        out = tmp_path / "out"
        assert _run(base, "forward", "--config", config_file, "--concept", "fb-nash", "--out", out, "--check-nash") == 0
        check = orjson.loads((out / "solver_report_fb-nash.json").read_bytes())["nash_check"]
        assert check["gains"] == "finite-horizon"
        assert check["is_nash"] is True
        assert check["tolerance"] == 1e-6

    def test_system_required(self, base, tmp_path):
        assert _run(base, "forward", "--out", tmp_path) == 2

    def test_feedback_nash_needs_linear_game(self, base, tmp_path):
        assert _run(base, "forward", "--system", "ball-on-beam", "--concept", "fb-nash", "--out", tmp_path) == 2

    def test_unknown_system(self, base, tmp_path):
        assert _run(base, "forward", "--system", "cart-pole", "--out", tmp_path) == 2

    def test_bad_arguments(self, base):
        assert _run(base, "forward", "--d-variant", "midpoint") == 2
        assert _run(base, "launch") == 2


class TestIdentifyAndEvaluate:
    """Identify and evaluate subcommands on forward output."""

    def test_identify_from_forward_output(self, base, config_file, tmp_path):
        out = tmp_path / "out"
        assert _run(base, "forward", "--config", config_file, "--out", out) == 0
        demo = out / "trajectory_ol-nash.csv"
        code = _run(base, "identify", demo, "--config", config_file, "--player", 1, "--out", out, "--d-variant", "plain")
        assert code in (0, 3)
        result = orjson.loads((out / "identification_ol-nash_player1.json").read_bytes())
        assert result["players"] == [1]
        assert result["fixed"] == [{"player": 1, "index": 2, "value": 1.0}]
        assert result["theta"][0][1] == 1.0

    def test_identify_rejects_corrupt_csv(self, base, config_file, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("k,t,x1,u1_1,u2_1\n1,0,1,oops,0\n2,1,1,0,0\n")
        assert _run(base, "identify", bad, "--config", config_file, "--out", tmp_path) == 2

    def test_identify_rejects_unknown_player(self, base, config_file, tmp_path):
        out = tmp_path / "out"
        _run(base, "forward", "--config", config_file, "--out", out)
        assert _run(base, "identify", out / "trajectory_ol-nash.csv", "--config", config_file, "--player", 3, "--out", out) == 2

    def test_evaluate_identical_trajectories(self, base, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        _run(base, "forward", "--config", config_file, "--out", out)
        capsys.readouterr()
        demo = out / "trajectory_ol-nash.csv"
        assert _run(base, "evaluate", demo, demo, "--config", config_file, "--out", out) == 0
        printed = orjson.loads(capsys.readouterr().out)
        assert printed == {"e_x": 0.0, "e_u": 0.0}
        assert (out / "evaluation.json").exists()


class TestReproduce:
    """Reproduce-paper exit codes."""

    @staticmethod
    def _bundle(passed) -> ExperimentBundle:
        traj = Trajectory.from_arrays(np.ones((3, 1)), [np.ones((3, 1))])
        return ExperimentBundle(
            config={},
            references={"LOLN": traj},
            cells=(),
            grid=(GridCell(pipeline="LOLN", snr_db=math.inf),),
            checks=(AcceptanceCheck(name="noiseless", passed=passed),),
        )

    @pytest.mark.parametrize("passed, code", [(True, 0), (False, 1), (None, 0)])
    def test_exit_code_follows_checks(self, base, tmp_path, mocker, passed, code):
        service = mocker.patch("app.api.cli.ExperimentService")
        service.return_value.run.return_value = self._bundle(passed)
        service.return_value.config = base
        assert _run(base, "reproduce-paper", "--only", "loln", "--out", tmp_path) == code
        experiment = service.call_args.args[0]
        assert experiment.pipelines == ["LOLN"]
        assert (tmp_path / "summary.json").exists()
        assert (tmp_path / "nmae_grid.csv").exists()
