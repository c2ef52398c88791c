import math

import numpy as np
import pytest

from app.core.exceptions import DimensionMismatchError
from app.models.trajectory import Trajectory
from app.services.game import build_demonstration_set, global_cost, rollout
from app.services.lq import solve_open_loop_nash_lq
from app.services.likelihood import (
    CostScope,
    DemonstrationModel,
    LogLikelihood,
    cost_gradient_g,
    cost_hessian_G,
    gaussian_log_density,
    log_density_approx,
)
from app.services.sensitivity import control_jacobian


@pytest.fixture
def wandering(scalar_lq):
    """A feasible but non-optimal joint trajectory of the scalar game."""
    system = scalar_lq(horizon=5, a=1.05, b=(1.0, 0.5))
    controls = [np.array([-0.3, 0.1, -0.2, 0.05, 0.0]), np.array([0.2, -0.4, 0.1, 0.0, 0.1])]
    return system, rollout(system.game, controls, system.x1)


class TestGaussianLogDensity:
    """Laplace log-density."""

    def test_standard_normal_at_mean(self):
        value, condition, warnings = gaussian_log_density(np.zeros(1), np.eye(1))
        assert value == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert value == pytest.approx(-0.9189, abs=1e-4)
        assert condition == pytest.approx(1.0)
        assert warnings == ()

    def test_precision_scales_density(self):
        value, _, _ = gaussian_log_density(np.zeros(1), np.array([[4.0]]))
        assert value == pytest.approx(-0.2258, abs=1e-4)

    def test_offset_from_mean(self):
        """-1/2 g^T G^-1 g enters for a non-stationary demonstration."""
        value, _, _ = gaussian_log_density(np.array([2.0]), np.array([[4.0]]))
        assert value == pytest.approx(-0.5 + 0.5 * math.log(4.0) - 0.5 * math.log(2 * math.pi))

    def test_indefinite_hessian_is_impossible(self):
        value, condition, warnings = gaussian_log_density(np.zeros(2), np.diag([1.0, -1.0]))
        assert value == -math.inf
        assert condition == math.inf
        assert warnings

    def test_ill_conditioning_warns(self):
        _, condition, warnings = gaussian_log_density(np.zeros(2), np.diag([1.0, 1e-14]), condition_limit=1e12)
        assert condition > 1e12
        assert "ill-conditioned" in warnings[0]


class TestQuadraticModel:
    """Gradient and Hessian of the demonstration cost."""

    def test_model_is_exact_for_linear_quadratic_games(self, wandering):
        """J(u_E + d) = J(u_E) + g^T d + 1/2 d^T G d holds exactly with the plain map."""
        system, traj = wandering
        scope = CostScope.joint(system.game)
        theta = scope.theta_vector(system.theta)
        model = DemonstrationModel(traj, system.game, scope, "plain")
        g, G = model.gradient(theta), model.hessian(theta)
        delta = np.random.default_rng(3).normal(scale=0.3, size=g.size)
        moved = delta.reshape(traj.horizon, 2)
        perturbed = rollout(
            system.game,
            [traj.controls[0][:, 0] + moved[:, 0], traj.controls[1][:, 0] + moved[:, 1]],
            system.x1,
        )
        expected = global_cost(perturbed, system.theta, system.game) - global_cost(traj, system.theta, system.game)
        assert g @ delta + 0.5 * delta @ G @ delta == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_jacobian_route_agrees_with_cached_models(self, wandering):
        system, traj = wandering
        scope = CostScope.player(system.game, 1)
        d = control_jacobian(traj, system.game, scope.players, "plain")
        model = DemonstrationModel(traj, system.game, scope, "plain")
        theta = scope.theta_vector(system.theta)
        np.testing.assert_allclose(cost_gradient_g(traj, system.theta, system.game, scope, d), model.gradient(theta))
        np.testing.assert_allclose(cost_hessian_G(traj, system.theta, system.game, scope, d), model.hessian(theta))

    def test_shared_features_share_one_model(self, wandering):
        """Both players' x^2 weights act on one cached feature and get the same derivative."""
        system, traj = wandering
        scope = CostScope.joint(system.game)
        model = DemonstrationModel(traj, system.game, scope, "plain")
        assert model.keys == ("x1^2", "u1_1^2", "u2_1^2")
        assert model.index.tolist() == [0, 1, 0, 2]
        _, grad = model.derivatives(np.array([1.0, 2.0, 3.0, 1.5]))
        assert grad[0] == grad[2]


class TestDerivatives:
    """Log-likelihood derivatives in theta."""

    @pytest.mark.parametrize("variant", ["plain", "trapezoid"])
    def test_analytic_gradient_matches_central_differences(self, wandering, variant):
        system, traj = wandering
        scope = CostScope.joint(system.game)
        likelihood = LogLikelihood(build_demonstration_set([traj], system.game), system.game, scope, variant)
        theta = np.array([1.5, 0.8, 0.7, 1.2])
        _, grad = likelihood.derivatives(theta)
        np.testing.assert_allclose(grad, likelihood.central_gradient(theta), rtol=1e-5, atol=1e-7)

    def test_profile_gradient_matches_central_differences(self, wandering):
        system, traj = wandering
        scope = CostScope.player(system.game, 0)
        likelihood = LogLikelihood(build_demonstration_set([traj], system.game), system.game, scope, "plain")
        theta = np.array([1.5, 0.8])
        eps = 1e-6
        numeric = []
        for f in range(2):
            e = np.zeros(2)
            e[f] = eps
            numeric.append((likelihood.profile(theta + e).objective - likelihood.profile(theta - e).objective) / (2 * eps))
        np.testing.assert_allclose(likelihood.profile(theta).gradient, numeric, rtol=1e-5, atol=1e-9)

    def test_profile_is_the_likelihood_at_the_best_scale(self, wandering):
        """ln L(c theta) at c = D / Q equals the profile up to the closed-form constant."""
        system, traj = wandering
        scope = CostScope.joint(system.game)
        likelihood = LogLikelihood(build_demonstration_set([traj], system.game), system.game, scope, "plain")
        theta = np.array([1.5, 0.8, 0.7, 1.2])
        profile = likelihood.profile(theta)
        c = profile.rationality
        d = likelihood.dim
        best = likelihood(c * theta)
        assert best > likelihood(0.9 * c * theta)
        assert best > likelihood(1.1 * c * theta)
        expected = 0.5 * d * (math.log(d) - 1.0 - math.log(2 * math.pi)) - 0.5 * d * math.log(profile.objective)
        assert best == pytest.approx(expected, rel=1e-10)

    def test_gradient_map_is_linear_in_theta(self, wandering):
        system, traj = wandering
        scope = CostScope.joint(system.game)
        likelihood = LogLikelihood(build_demonstration_set([traj], system.game), system.game, scope, "plain")
        theta = np.array([1.5, 0.8, 0.7, 1.2])
        np.testing.assert_allclose(likelihood.gradient_map() @ theta, likelihood.models[0].gradient(theta), atol=1e-12)

    def test_single_player_log_density(self, single_player_game, single_player_demo):
        """With g = (theta_x - 1, 0) and G = diag(2 theta_x + 2, 2) the density is closed form."""
        game = single_player_game()
        scope = CostScope.player(game, 0)
        for theta_x in (0.5, 1.0, 3.0):
            expected = (
                -0.5 * (theta_x - 1.0) ** 2 / (2 * theta_x + 2)
                + 0.5 * math.log((2 * theta_x + 2) * 2)
                - math.log(2 * math.pi)
            )
            value = log_density_approx(single_player_demo, np.array([theta_x, 1.0]), game, scope, "plain")
            assert value == pytest.approx(expected, rel=1e-12)

    def test_density_integrates_to_one(self, single_player_game, single_player_demo):
        """For a quadratic cost the approximation is exact: exp(-J) normalized on a grid."""
        game = single_player_game()
        scope = CostScope.player(game, 0)
        theta = np.array([1.7, 0.6])
        grid = np.linspace(-8.0, 8.0, 801)
        h = grid[1] - grid[0]
        u1, u2 = np.meshgrid(grid, grid, indexing="ij")
        cost = theta[0] * (1.0 + (1.0 + u1) ** 2) + theta[1] * (u1**2 + u2**2)
        observed = theta[0] * (1.0 + 0.25) + theta[1] * 0.25
        log_z = math.log(np.sum(np.exp(-(cost - observed))) * h * h)
        value = log_density_approx(single_player_demo, theta, game, scope, "plain")
        assert value == pytest.approx(-log_z, abs=1e-8)

    def test_exact_open_loop_demonstration_has_no_finite_scale(self, scalar_lq):
        """g vanishes at the equilibrium, so scaling theta only grows ln det G."""
        system = scalar_lq(horizon=4, theta=((2.0, 1.0), (1.0, 3.0)))
        traj, _ = solve_open_loop_nash_lq(system.linear, system.theta, system.x1, 4)
        scope = CostScope.player(system.game, 0)
        model = DemonstrationModel(traj, system.game, scope, "plain")
        theta = scope.theta_vector(system.theta)
        assert np.max(np.abs(model.gradient(theta))) < 1e-12
        values = [model.log_density(c * theta) for c in (1.0, 2.0, 4.0)]
        assert values[0] < values[1] < values[2]
        assert values[1] - values[0] == pytest.approx(0.5 * model.dim * math.log(2.0))

    def test_infeasible_parameters(self, single_player_game, single_player_demo):
        game = single_player_game()
        scope = CostScope.player(game, 0)
        likelihood = LogLikelihood(build_demonstration_set([single_player_demo], game), game, scope, "plain")
        assert likelihood(np.array([-3.0, 1.0])) == -math.inf
        value, grad = likelihood.derivatives(np.array([-3.0, 1.0]))
        assert value == -math.inf and np.all(np.isnan(grad))
        assert likelihood.profile(np.array([-3.0, 1.0])) is None


class TestScope:
    def test_theta_vector_from_parameters(self, scalar_lq):
        system = scalar_lq(theta=((2.0, 1.0), (3.0, 4.0)))
        assert CostScope.joint(system.game).theta_vector(system.theta).tolist() == [2.0, 1.0, 3.0, 4.0]
        assert CostScope.player(system.game, 1).theta_vector(system.theta).tolist() == [3.0, 4.0]

    def test_wrong_vector_length(self, scalar_lq):
        scope = CostScope.player(scalar_lq().game, 0)
        with pytest.raises(DimensionMismatchError):
            scope.theta_vector(np.ones(3))


def test_demonstration_and_trajectory_dimensions_must_agree(single_player_game):
    game = single_player_game()
    bad = Trajectory.from_arrays(np.zeros((3, 2)), [np.zeros((3, 1))])
    with pytest.raises(DimensionMismatchError):
        DemonstrationModel(bad, game, CostScope.player(game, 0), "plain")
