import numpy as np
import pytest

from app.core.exceptions import ConfigurationError
from app.models.game import CostParameters
from app.services.forward import (
    ForwardSolverService,
    adjoint_gradient,
    cooperative_objective,
    objective_value,
    player_objective,
)
from app.services.game import global_cost, is_feasible, rollout, trajectory_cost
from app.systems.registry import registry


@pytest.fixture
def solver(settings) -> ForwardSolverService:
    return ForwardSolverService(settings)


class TestObjectives:
    """Single-agent objectives and their gradients."""

    def test_objective_matches_trajectory_cost(self, scalar_lq):
        system = scalar_lq(horizon=4)
        traj = rollout(system.game, [np.full(4, -0.2), np.full(4, 0.1)], system.x1)
        assert objective_value(traj, player_objective(system.game, system.theta, 1)) == pytest.approx(
            trajectory_cost(traj, system.theta, system.game, 1)
        )
        assert objective_value(traj, cooperative_objective(system.game, system.theta)) == pytest.approx(
            global_cost(traj, system.theta, system.game)
        )

    def test_adjoint_gradient_matches_differences(self, short_settings):
        """Reverse sweep through the RK4 ball-on-beam agrees with central differences."""
        system = registry.get("ball-on-beam", short_settings)
        game = system.game.with_horizon(5)
        objective = player_objective(game, system.theta, 0)
        controls = [np.array([0.1, -0.2, 0.05, 0.0, 0.3]), np.full(5, 0.02)]
        traj = rollout(game, controls, system.x1)
        grad = adjoint_gradient(traj, game, objective, (0,))
        eps = 1e-6
        for k in range(5):
            up = [c.copy() for c in controls]
            down = [c.copy() for c in controls]
            up[0][k] += eps
            down[0][k] -= eps
            fd = (objective_value(rollout(game, up, system.x1), objective)
                  - objective_value(rollout(game, down, system.x1), objective)) / (2 * eps)
            assert grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestCooperative:
    """Pareto (cooperative) solutions."""

    def test_scalar_pareto_controls(self, solver, scalar_lq):
        """Minimizing the summed costs gives u_1 = u_2 = -0.4 and x(2) = 0.2."""
        system = scalar_lq()
        traj, report = solver.solve(system, "cg")[:2]
        assert report.converged
        assert traj.controls[0][0, 0] == pytest.approx(-0.4, abs=1e-7)
        assert traj.controls[1][0, 0] == pytest.approx(-0.4, abs=1e-7)
        assert traj.states[1, 0] == pytest.approx(0.2, abs=1e-7)
        assert is_feasible(traj, system.game)

    @pytest.mark.parametrize("scale", [0.5, 3.0])
    def test_scaling_the_weights_keeps_the_minimizer(self, short_settings, scale):
        solver = ForwardSolverService(short_settings)
        system = registry.get("ball-on-beam-lq", short_settings)
        base, _, _ = solver.solve(system, "cg")
        scaled_theta = CostParameters(theta=tuple(scale * t for t in system.theta.theta))
        scaled, report, _ = solver.solve(system, "cg", theta=scaled_theta)
        assert report.converged
        for u, v in zip(base.controls, scaled.controls):
            np.testing.assert_allclose(v, u, atol=1e-8 * max(1.0, float(np.max(np.abs(u)))))

    def test_random_perturbations_do_not_lower_the_global_cost(self, short_settings):
        solver = ForwardSolverService(short_settings)
        system = registry.get("ball-on-beam", short_settings)
        traj, report, _ = solver.solve(system, "cg")
        assert report.converged
        best = global_cost(traj, system.theta, system.game)
        rng = np.random.default_rng(7)
        for _ in range(10):
            controls = [u + 1e-3 * rng.standard_normal(u.shape) for u in traj.controls]
            perturbed = rollout(system.game, controls, system.x1)
            assert global_cost(perturbed, system.theta, system.game) >= best - 1e-10 * abs(best)


class TestOpenLoopNash:
    """Iterated best response to open-loop Nash."""

    def test_iterative_solver_matches_closed_form(self, solver, scalar_lq):
        """Best-response sweeps on a linear game land on the recursion's equilibrium."""
        system = scalar_lq(horizon=6, theta=((2.0, 1.0), (1.0, 3.0)))
        closed_form, _, _ = solver.solve(system, "ol-nash")
        iterative, report = solver.solve_open_loop_nash(system.game, system.theta, system.x1)
        assert report.converged
        np.testing.assert_allclose(iterative.states, closed_form.states, atol=1e-6)
        np.testing.assert_allclose(iterative.controls[0], closed_form.controls[0], atol=1e-6)

    def test_check_certifies_open_loop_equilibrium(self, solver, scalar_lq):
        system = scalar_lq()
        traj, _, _ = solver.solve(system, "ol-nash")
        check = solver.check_nash(traj, system.game, system.theta, "open-loop")
        assert check.is_nash
        assert all(d.improvement < 1e-10 for d in check.players)

    def test_check_rejects_cooperative_solution(self, solver, scalar_lq):
        """Against u_2 = -0.4 player 1 prefers u_1 = -0.3."""
        system = scalar_lq()
        traj, _, _ = solver.solve(system, "cg")
        check = solver.check_nash(traj, system.game, system.theta, "open-loop")
        assert not check.is_nash
        assert check.players[0].cost == pytest.approx(1.2)
        assert check.players[0].improvement == pytest.approx(0.02, abs=1e-7)


class TestFeedbackNash:
    """Feedback Nash solutions."""

    def test_finite_horizon_gains_pass_the_check(self, solver, scalar_lq):
        system = scalar_lq(horizon=6, theta=((2.0, 1.0), (1.0, 3.0)))
        traj, report, gains = solver.solve(system, "fb-nash", stationary=False)
        assert report.converged
        check = solver.check_nash(traj, system.game, system.theta, "feedback", gains)
        assert check.is_nash

    def test_ball_on_beam_lq_feedback_equilibrium_is_certified(self, short_settings):
        solver = ForwardSolverService(short_settings)
        system = registry.get("ball-on-beam-lq", short_settings)
        traj, gains, check = solver.check_feedback_nash(system)
        assert not gains.stationary
        assert traj.horizon == 51
        assert check.tolerance == 1e-6
        assert check.is_nash
        assert all(d.certified and d.inner_converged for d in check.players)

    def test_feedback_certification_needs_linear_game(self, solver, short_settings):
        with pytest.raises(ConfigurationError):
            solver.check_feedback_nash(registry.get("ball-on-beam", short_settings))

    def test_feedback_check_needs_gains(self, solver, scalar_lq):
        system = scalar_lq()
        traj, _, _ = solver.solve(system, "ol-nash")
        with pytest.raises(ConfigurationError):
            solver.check_nash(traj, system.game, system.theta, "feedback")

    def test_nonlinear_system_rejected(self, solver, short_settings):
        system = registry.get("ball-on-beam", short_settings)
        with pytest.raises(ConfigurationError):
            solver.solve(system, "fb-nash")

    def test_unknown_concept(self, solver, scalar_lq):
        with pytest.raises(ConfigurationError):
            solver.solve(scalar_lq(), "stackelberg")
