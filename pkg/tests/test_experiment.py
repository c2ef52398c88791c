import math

import numpy as np
import pytest

from app.api.schemas import ExperimentConfig
from app.models.game import FixedWeight
from app.models.results import CellOutcome, ErrorReport, ExperimentBundle, GridCell
from app.models.trajectory import Trajectory
from app.services.experiment import (
    PIPELINES,
    REFERENCE_NMAE,
    ExperimentService,
    cell_seed,
    free_positions,
    reference_tables,
)


def _cell(pipeline: str, snr_db: float, replicate: int, e_x: float, e_u: float) -> CellOutcome:
    return CellOutcome(
        pipeline=pipeline,
        snr_db=snr_db,
        replicate=replicate,
        seed=replicate,
        ok=True,
        nmae=ErrorReport(e_x=e_x, e_u=e_u, channels={}),
    )


def _bundle(service: ExperimentService, cells) -> ExperimentBundle:
    traj = Trajectory.from_arrays(np.ones((3, 1)), [np.ones((3, 1))])
    return ExperimentBundle(
        config={}, references={"LOLN": traj}, cells=tuple(cells), grid=service.grid(cells)
    )


class TestSeeds:
    """Cell seeding."""

    def test_deterministic(self):
        assert cell_seed(0, "LOLN", 2, 1) == cell_seed(0, "LOLN", 2, 1)

    def test_distinct_per_coordinate(self):
        seeds = {
            cell_seed(0, "LOLN", 0, 0),
            cell_seed(1, "LOLN", 0, 0),
            cell_seed(0, "FB", 0, 0),
            cell_seed(0, "LOLN", 1, 0),
            cell_seed(0, "LOLN", 0, 1),
        }
        assert len(seeds) == 5

    def test_free_positions(self):
        fixed = [FixedWeight(player=0, index=4, value=2.0), FixedWeight(player=1, index=0, value=1.0)]
        assert free_positions(5, fixed, 0) == [True, True, True, True, False]
        assert free_positions(3, fixed, 1) == [False, True, True]


class TestGrid:
    """Median NMAE grid."""

    @pytest.fixture
    def service(self, settings) -> ExperimentService:
        return ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["20", "inf"], seeds=3), settings)

    def test_median_over_successful_cells(self, service):
        cells = [
            _cell("LOLN", math.inf, 0, 0.01, 0.04),
            _cell("LOLN", math.inf, 1, 0.03, 0.02),
            _cell("LOLN", math.inf, 2, 0.02, 0.09),
            CellOutcome(pipeline="LOLN", snr_db=20.0, seed=1, ok=False, error={"error": "SolverError"}),
        ]
        grid = {g.snr_db: g for g in service.grid(cells)}
        assert grid[math.inf].e_x == pytest.approx(0.02)
        assert grid[math.inf].e_u == pytest.approx(0.04)
        assert grid[math.inf].samples == 3
        assert grid[20.0] == GridCell(pipeline="LOLN", snr_db=20.0)

    def test_resolved_settings_follow_the_experiment(self, settings):
        service = ExperimentService(ExperimentConfig(horizon=11, workers=2), settings)
        assert service.config.horizon == 11
        assert service.config.workers == 2
        assert service.forward.config is service.config


class TestAcceptance:
    """Acceptance checks on synthetic bundles."""

    def test_noise_trend(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["20", "30", "inf"]), settings)
        rising = [_cell("LOLN", 20.0, 0, 0.05, 0.3), _cell("LOLN", 30.0, 0, 0.02, 0.02), _cell("LOLN", math.inf, 0, 0.01, 0.01)]
        assert service._noise_trend(_bundle(service, rising)).passed is True
        inverted = [_cell("LOLN", 20.0, 0, 0.01, 0.01), _cell("LOLN", 30.0, 0, 0.02, 0.02), _cell("LOLN", math.inf, 0, 0.05, 0.3)]
        check = service._noise_trend(_bundle(service, inverted))
        assert check.passed is False
        assert check.detail == {"LOLN": False}

    def test_noise_trend_is_strict(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["20", "30"]), settings)
        flat = [_cell("LOLN", 20.0, 0, 0.02, 0.02), _cell("LOLN", 30.0, 0, 0.02, 0.02)]
        assert service._noise_trend(_bundle(service, flat)).passed is True
        bump = [_cell("LOLN", 20.0, 0, 0.02, 0.02), _cell("LOLN", 30.0, 0, 0.0201, 0.02)]
        assert service._noise_trend(_bundle(service, bump)).passed is False

    def test_noise_trend_needs_two_levels(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["inf"]), settings)
        assert service._noise_trend(_bundle(service, [])).passed is None

    def test_magnitude_against_published_30db(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["30"]), settings)
        e_x, e_u = REFERENCE_NMAE["LOLN"]["30"]
        close = service._magnitude(_bundle(service, [_cell("LOLN", 30.0, 0, 2 * e_x, e_u / 2)]))
        assert close.passed is True
        far = service._magnitude(_bundle(service, [_cell("LOLN", 30.0, 0, 10 * e_x, e_u)]))
        assert far.passed is False
        assert far.detail["LOLN"]["ratios"][0] == pytest.approx(10.0)

    def test_magnitude_skipped_without_30db(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["inf"]), settings)
        assert service._magnitude(_bundle(service, [])).passed is None

    def test_noiseless_recovery(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["inf"]), settings)
        good = service._noiseless(_bundle(service, [_cell("LOLN", math.inf, 0, 0.01, 0.01)]))
        assert good.passed is True
        bad = service._noiseless(_bundle(service, [_cell("LOLN", math.inf, 0, 0.01, 0.5)]))
        assert bad.passed is False
        assert bad.detail["LOLN"]["e_u"] == 0.5

    def test_unevaluated_checks_do_not_fail_the_bundle(self, settings):
        service = ExperimentService(ExperimentConfig(pipelines=["LOLN"], snr=["inf"]), settings)
        bundle = _bundle(service, [_cell("LOLN", math.inf, 0, 0.01, 0.01)])
        assert service._noln_parameters(bundle, {}).passed is None
        assert service._cg_pareto(bundle, {}).passed is None
        assert service._feature_matching(bundle, {}).passed is None
        assert service._nash_certification({}).passed is None
        assert service._feedback_gains({}).passed is None
        assert service._scale_degeneracy({}).passed is None
        assert service._normalization({}).passed is None


class TestReferenceChecks:
    """Checks evaluated on short noiseless reference demonstrations."""

    @pytest.fixture
    def service(self, settings) -> ExperimentService:
        return ExperimentService(ExperimentConfig(pipelines=["LOLN", "FB"], snr=["inf"], horizon=26), settings)

    @pytest.fixture
    def references(self, service):
        return {p: service.reference(p) for p in ("LOLN", "FB")}

    def test_linear_cost_derivatives(self, service, references):
        check = service._derivatives(references)
        assert check.passed is True
        assert list(check.detail) == ["ball-on-beam-lq"]
        for player in ("player1", "player2"):
            report = check.detail["ball-on-beam-lq"][player]
            assert report["draws"] == 20
            assert report["gradient_error"] <= 1e-6
            assert report["quadratic_remainder"] <= 1e-9

    def test_gaussian_density_integrates_to_one(self, service, references):
        check = service._normalization(references)
        assert check.passed is True
        assert check.detail["dim"] == 2
        assert check.detail["samples"] >= 100_000
        assert check.detail["error"] <= 0.02

    def test_feedback_gains_recovered_from_the_reference(self, service, references):
        check = service._feedback_gains(references)
        assert check.passed is True
        assert max(check.detail["relative_errors"].values()) <= 1e-6

    def test_released_scale_raises_the_likelihood(self, service, references):
        check = service._scale_degeneracy(references)
        values = check.detail["log_likelihood"]
        assert check.detail["scales"] == [1.0, 2.0, 4.0, 8.0]
        assert all(b > a for a, b in zip(values, values[1:]))
        assert check.detail["fixed_converged"] is True
        assert check.detail["fixed_gradient_norm"] <= 1e-8
        assert check.passed is True

    def test_linear_nash_references_are_certified(self, service, references):
        check = service._nash_certification(references)
        assert check.passed is True
        assert check.detail["LOLN"]["concept"] == "open-loop"
        assert check.detail["FB"]["concept"] == "feedback"
        assert all(d["is_nash"] for d in check.detail.values())

    def test_nonconverged_cell_is_failed(self, service, references, mocker):
        ref = references["LOLN"]
        mocker.patch.object(service, "identify", return_value=(ref.system.theta.theta, (None, None), False))
        cell = service.run_cell(ref, "LOLN", 0, 0)
        assert cell.ok is False
        assert cell.error["error"] == "NotConverged"
        assert cell.nmae is None
        assert len(cell.theta) == 2

    def test_nonconverged_cell_scored_when_allowed(self, settings, mocker):
        experiment = ExperimentConfig(pipelines=["LOLN"], snr=["inf"], horizon=26, allow_nonconverged=True)
        service = ExperimentService(experiment, settings)
        ref = service.reference("LOLN")
        mocker.patch.object(service, "identify", return_value=(ref.system.theta.theta, (None, None), False))
        cell = service.run_cell(ref, "LOLN", 0, 0)
        assert cell.ok is True
        assert cell.converged is False
        assert cell.nmae.e_x <= 1e-9


@pytest.mark.slow
class TestNonlinearReferenceChecks:
    """Checks on the RK4 ball-on-beam references."""

    @pytest.fixture
    def service(self, settings) -> ExperimentService:
        return ExperimentService(ExperimentConfig(pipelines=["CG", "NOLN"], snr=["inf"], horizon=26), settings)

    @pytest.fixture
    def references(self, service):
        return {p: service.reference(p) for p in ("CG", "NOLN")}

    def test_nonlinear_cost_gradients(self, service, references):
        check = service._derivatives(references)
        detail = check.detail["ball-on-beam"]
        assert detail["linear"] is False
        assert detail["player1"]["quadratic_remainder"] is None
        assert max(detail[p]["gradient_error"] for p in ("player1", "player2")) <= 1e-4
        assert check.passed is True

    def test_cooperative_reference_fails_open_loop_check(self, service, references):
        check = service._nash_certification(references)
        assert check.detail["CG"]["is_nash"] is False
        assert max(check.detail["CG"]["improvements"]) > 1e-6
        assert check.detail["NOLN"]["is_nash"] is True
        assert check.passed is True


def test_reference_tables():
    tables = reference_tables()
    assert set(tables["parameters"]) == set(PIPELINES)
    assert tables["nmae"]["FB"]["inf"] == {"e_x": 0.013, "e_u": 0.032}
    assert len(tables["true_parameters"]["theta1"]) == 5


@pytest.mark.slow
def test_noiseless_linearized_pipeline(settings):
    experiment = ExperimentConfig(pipelines=["LOLN"], snr=["inf"], horizon=26, feature_samples=0)
    bundle = ExperimentService(experiment, settings).run()
    assert len(bundle.cells) == 1
    assert bundle.cells[0].seed == cell_seed(0, "LOLN", 0, 0)
    assert [c.name for c in bundle.checks] == [
        "noiseless_recovery",
        "noln_parameters",
        "cg_pareto",
        "derivatives",
        "gaussian_normalization",
        "fb_feature_matching",
        "nash_certification",
        "feedback_gains",
        "scale_degeneracy",
        "noise_trend",
        "magnitude_30db",
    ]
    assert bundle.references["LOLN"].horizon == 26
    checks = {c.name: c.passed for c in bundle.checks}
    for name in ("noiseless_recovery", "derivatives", "gaussian_normalization", "nash_certification", "scale_degeneracy"):
        assert checks[name] is True, name
    assert checks["feedback_gains"] is None
