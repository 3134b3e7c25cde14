import numpy as np
import pytest

import oracles

from errors import CapabilityError, ChartExitError, DimensionError, IntegrationError
from geometry import HyperbolicDisk, Sphere, load_model
from pathsim import (
    BrownianDriver,
    FinalStateObserver,
    PotentialObserver,
    TrajectoryObserver,
    initial_state,
    noise_dim,
    simulate_path,
    step_frame_bundle,
)
from potentials import load_fields


def _zero(model):
    return load_fields("zero", "zero", model)


class TestBrownianDriver:
    def test_replay_is_bit_identical(self):
        driver = BrownianDriver(seed=3, batch_index=1, n_paths=50, dim=2, dt=0.01, n_steps=10)
        first = np.stack(list(driver))
        second = np.stack(list(driver.replay()))
        assert np.array_equal(first, second)
        assert first.shape == (10, 50, 2)

    def test_batches_have_independent_streams(self):
        a = BrownianDriver(seed=3, batch_index=0, n_paths=50, dim=2, dt=0.01, n_steps=1).increment()
        b = BrownianDriver(seed=3, batch_index=1, n_paths=50, dim=2, dt=0.01, n_steps=1).increment()
        assert not np.allclose(a, b)

    def test_increment_variance(self):
        driver = BrownianDriver(seed=0, batch_index=0, n_paths=100000, dim=1, dt=0.04, n_steps=1)
        assert np.var(driver.increment()) == pytest.approx(0.04, rel=0.02)

    def test_horizon(self):
        assert BrownianDriver(0, 0, 1, 1, 0.005, 200).t == pytest.approx(1.0)


class TestFrameBundle:
    def test_flat_paths_are_sums_of_increments(self):
        model = load_model("euclidean:2")
        x0 = np.array([0.5, -1.0])
        driver = BrownianDriver(seed=1, batch_index=0, n_paths=100, dim=2, dt=0.01, n_steps=20)
        result = simulate_path(model, _zero(model), x0, driver)
        expected = x0 + np.stack(list(driver.replay())).sum(axis=0)
        np.testing.assert_allclose(result.state.x, expected, atol=1e-12)
        assert result.failed_count == 0

    def test_sphere_paths_stay_on_sphere_with_orthonormal_frames(self):
        model = Sphere(r=2.0)
        driver = BrownianDriver(seed=0, batch_index=0, n_paths=500, dim=2, dt=0.01, n_steps=50)
        result = simulate_path(model, _zero(model), model.default_point(), driver)
        state = result.state
        np.testing.assert_allclose(np.linalg.norm(state.x, axis=-1), 2.0, atol=1e-12)
        assert model.frame_defect(state.x, state.u) < 1e-10
        np.testing.assert_allclose(np.einsum("pi,pic->pc", state.x, state.u), 0.0, atol=1e-10)

    @pytest.mark.parametrize("representation", ["frame", "gradient"])
    def test_sphere_height_decays_at_eigenvalue_rate(self, representation):
        model = load_model("sphere:r=1")
        x0 = model.default_point()
        t, dt, n_paths = 0.5, 0.005, 20000
        driver = BrownianDriver(0, 0, n_paths, noise_dim(model, representation), dt, int(round(t / dt)))
        result = simulate_path(model, _zero(model), x0, driver, representation=representation)
        height = result.state.x[:, 2]
        stderr = np.std(height) / np.sqrt(n_paths)
        assert abs(np.mean(height) - np.exp(-t)) <= 4.0 * stderr + dt

    def test_ornstein_uhlenbeck_marginal(self):
        model = load_model("euclidean:1")
        fields = load_fields("quadratic:c=1", "zero", model)
        n_paths, dt, n_steps = 20000, 0.005, 200
        driver = BrownianDriver(2, 0, n_paths, 1, dt, n_steps)
        result = simulate_path(model, fields, np.array([1.0]), driver)
        a, variance = oracles.gaussian_law(model, fields, dt * n_steps)
        x = result.state.x[:, 0]
        assert abs(np.mean(x) - a) <= 4.0 * np.sqrt(variance / n_paths)
        assert abs(np.var(x, ddof=1) - variance) <= 4.0 * variance * np.sqrt(2.0 / (n_paths - 1)) + 2e-3

    def test_driver_dimension_must_match(self):
        model = load_model("sphere:r=1")
        driver = BrownianDriver(0, 0, 10, 3, 0.01, 1)
        with pytest.raises(DimensionError):
            simulate_path(model, _zero(model), model.default_point(), driver)

    def test_step_noise_dimension(self):
        model = load_model("euclidean:2")
        state = initial_state(model, np.zeros(2), 4)
        with pytest.raises(DimensionError):
            step_frame_bundle(model, _zero(model), state, np.zeros((4, 3)), 0.01)


class TestRepresentations:
    def test_unknown_representation(self):
        model = load_model("euclidean:1")
        with pytest.raises(CapabilityError):
            noise_dim(model, "stratonovich")

    def test_gradient_sde_needs_an_embedding(self):
        model = load_model("hyperbolic:r=1")
        driver = BrownianDriver(0, 0, 10, 2, 0.01, 1)
        with pytest.raises(CapabilityError):
            simulate_path(model, _zero(model), np.zeros(2), driver, representation="gradient")


class TestDomainExit:
    def test_projection_failure_raises_integration_error(self):
        model = Sphere(r=1.0, proj_guard=1e-6)
        driver = BrownianDriver(0, 0, 100, 2, 0.5, 2)
        with pytest.raises(IntegrationError) as info:
            simulate_path(model, _zero(model), model.default_point(), driver, on_exit="raise")
        assert len(info.value.failed) > 0
        assert info.value.last_state.t == 0.0

    def test_projection_failure_freezes_paths(self):
        model = Sphere(r=1.0, proj_guard=1e-6)
        driver = BrownianDriver(0, 0, 100, 2, 0.5, 2)
        result = simulate_path(model, _zero(model), model.default_point(), driver)
        assert result.failed_count == int(np.sum(~result.alive)) > 0
        np.testing.assert_allclose(result.state.x[~result.alive], [[0.0, 0.0, 1.0]] * result.failed_count)

    def test_chart_exit_near_the_disk_boundary(self):
        model = HyperbolicDisk(r=1.0)
        x0 = np.array([0.9999985, 0.0])
        driver = BrownianDriver(0, 0, 200, 2, 0.25, 4)
        with pytest.raises(ChartExitError):
            simulate_path(model, _zero(model), x0, driver, on_exit="raise")

    def test_initial_point_outside_domain(self):
        model = HyperbolicDisk(r=1.0)
        driver = BrownianDriver(0, 0, 10, 2, 0.01, 1)
        with pytest.raises(DimensionError):
            simulate_path(model, _zero(model), np.array([1.5, 0.0]), driver)


class TestObservers:
    def test_potential_and_trajectory(self):
        model = load_model("euclidean:1")
        fields = load_fields("zero", "constant:c=2", model)
        driver = BrownianDriver(0, 0, 10, 1, 0.01, 10)
        observers = [FinalStateObserver(), PotentialObserver(fields), TrajectoryObserver(every=5)]
        result = simulate_path(model, fields, np.zeros(1), driver, observers)
        final, integral, trajectory = result.outputs
        np.testing.assert_allclose(final["x"], result.state.x)
        np.testing.assert_allclose(integral, 0.2)
        np.testing.assert_allclose(trajectory["t"], [0.0, 0.05, 0.1])
        assert trajectory["x"].shape == (3, 10, 1)
