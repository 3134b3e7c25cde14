import numpy as np
import pytest

import estimators
import oracles
from errors import CapabilityError, ConfigError, EstimationError
from estimators import MomentAccumulator, MonteCarloConfig, singular_weights, split_halves, tree_merge
from geometry import Sphere, load_model
from observables import TestFunction, load_test_function
from potentials import load_fields


SQRT_HALF = np.sqrt(0.5)
SPHERE_X0 = np.array([0.0, SQRT_HALF, SQRT_HALF])
SPHERE_V = np.array([0.0, -SQRT_HALF, SQRT_HALF])


def assert_close_to_oracle(result, oracle, n_sigma=4.0, allowance=0.0):
    error = np.abs(np.asarray(result.mean) - oracle)
    assert np.all(error <= n_sigma * np.asarray(result.stderr) + allowance), (result.mean, result.stderr, oracle)


@pytest.fixture
def flat1():
    model = load_model("euclidean:1")
    return model, load_fields("zero", "zero", model)


@pytest.fixture
def sphere():
    model = load_model("sphere:r=1")
    return model, load_fields("zero", "zero", model)


class TestMonteCarloConfig:
    def test_defaults(self):
        mc = MonteCarloConfig()
        assert mc.n_steps(1.0) == 200
        assert mc.batches() == [5000, 5000]

    def test_ragged_last_batch(self):
        assert MonteCarloConfig(n_paths=12, batch_size=5).batches() == [5, 5, 2]

    @pytest.mark.parametrize(
        "kwargs",
        [{"n_paths": 0}, {"dt": 0.0}, {"batch_size": 0}, {"representation": "ito"}, {"on_exit": "ignore"}],
    )
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            MonteCarloConfig(**kwargs)

    def test_off_grid_time(self):
        with pytest.raises(ConfigError):
            MonteCarloConfig(dt=0.01).n_steps(0.105)

    def test_indivisible_steps(self):
        with pytest.raises(ConfigError):
            MonteCarloConfig(dt=0.005).n_steps(0.51, multiple=4)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_non_positive_time(self, t):
        with pytest.raises(ValueError):
            MonteCarloConfig().n_steps(t)


class TestReduction:
    def test_merge_matches_pooled_statistics(self):
        values = np.random.default_rng(0).standard_normal((1000, 3))
        parts = [MomentAccumulator.from_samples(chunk) for chunk in np.array_split(values, 7)]
        merged = tree_merge(parts)
        assert merged.count == 1000
        np.testing.assert_allclose(merged.mean, values.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(merged.variance, values.var(axis=0, ddof=1), rtol=1e-10)
        np.testing.assert_allclose(merged.maximum, values.max(axis=0))

    def test_empty_batch_is_neutral(self):
        values = np.arange(5.0)
        merged = MomentAccumulator.from_samples(values).merge(MomentAccumulator.from_samples(values[:0]))
        assert merged.count == 5
        assert merged.mean == pytest.approx(2.0)

    def test_worker_count_does_not_change_the_result(self, flat1):
        model, fields = flat1
        f = load_test_function("square:1", model)
        serial = estimators.feynman_kac(model, fields, f, 0.5, [0.1], MonteCarloConfig(n_paths=4000, batch_size=1000))
        pooled = estimators.feynman_kac(
            model, fields, f, 0.5, [0.1], MonteCarloConfig(n_paths=4000, batch_size=1000, workers=2)
        )
        assert serial.mean == pooled.mean
        assert serial.stderr == pooled.stderr

    def test_all_paths_failing(self):
        model = Sphere(r=1.0, proj_guard=1e-9)
        f = load_test_function("linear:3", model)
        mc = MonteCarloConfig(n_paths=100, dt=0.5)
        with pytest.raises(EstimationError):
            estimators.feynman_kac(model, load_fields("zero", "zero", model), f, 1.0, model.default_point(), mc)


class TestSingularWeights:
    def test_reduces_to_trapezoid_for_lipschitz_integrands(self):
        weights, residual = singular_weights(100, 0.01, 1.0)
        np.testing.assert_allclose(residual, 0.0, atol=1e-15)
        np.testing.assert_allclose(weights[2:-1], 0.01)
        assert weights[1] == pytest.approx(0.015)

    def test_integrates_inverse_square_root(self):
        m, dt = 400, 0.0025
        s = dt * np.arange(m + 1)
        weights, _ = singular_weights(m, dt, 0.5)
        approx = np.sum(weights[1:] / np.sqrt(s[1:]))
        assert approx == pytest.approx(2.0, rel=1e-4)

    @pytest.mark.parametrize("beta", [0.0, 1.5])
    def test_beta_range(self, beta):
        with pytest.raises(ValueError):
            singular_weights(10, 0.1, beta)


class TestFlatEstimators:
    def test_feynman_kac_gaussian(self, flat1, small_mc):
        model, fields = flat1
        f = load_test_function("square:1", model)
        result = estimators.feynman_kac(model, fields, f, 1.0, [0.3], small_mc)
        assert_close_to_oracle(result, 1.09)
        assert result.n_steps == 200
        assert result.failed_path_count == 0

    def test_constant_potential_scales_exactly(self, flat1, small_mc):
        model, fields = flat1
        f = load_test_function("square:1", model)
        shifted = load_fields("zero", "constant:c=0.7", model)
        base = estimators.feynman_kac(model, fields, f, 1.0, [0.3], small_mc)
        scaled = estimators.feynman_kac(model, shifted, f, 1.0, [0.3], small_mc)
        assert scaled.mean == pytest.approx(np.exp(-0.7) * base.mean, rel=1e-12)
        base_fk = estimators.hessian_fk(model, fields, f, 1.0, [0.3], [1.0], [1.0], small_mc)
        scaled_fk = estimators.hessian_fk(model, shifted, f, 1.0, [0.3], [1.0], [1.0], small_mc)
        assert scaled_fk.mean == pytest.approx(np.exp(-0.7) * base_fk.mean, rel=1e-12)
        assert scaled_fk.extras["terms"]["potential"] == 0.0

    def test_pathwise_gradient_and_elementary_hessian_are_exact(self):
        model = load_model("euclidean:2")
        fields = load_fields("zero", "zero", model)
        mc = MonteCarloConfig(n_paths=500)
        e1 = np.array([1.0, 0.0])
        grad = estimators.gradient_pathwise(model, fields, load_test_function("linear:1", model), 0.5, [0.3, 0.1], e1, mc)
        hess = estimators.hessian_elementary(model, fields, load_test_function("square:1", model), 0.5, [0.3, 0.1], e1, e1, mc)
        assert (grad.mean, grad.stderr) == (1.0, 0.0)
        assert (hess.mean, hess.stderr) == (2.0, 0.0)

    def test_bismut_gradient(self, flat1, small_mc):
        model, fields = flat1
        f = load_test_function("square:1", model)
        result = estimators.gradient_bismut(model, fields, f, 1.0, [0.3], [1.0], small_mc)
        assert_close_to_oracle(result, 0.6)

    def test_ornstein_uhlenbeck_mehler_gradient(self, small_mc):
        model = load_model("euclidean:1")
        fields = load_fields("quadratic:c=1", "zero", model)
        f = load_test_function("sine:1", model)
        result = estimators.gradient_pathwise(model, fields, f, 1.0, [0.0], [1.0], small_mc)
        oracle = oracles.lookup_oracle("gradient_pathwise", model, fields, f, 1.0, [0.0], [1.0])
        assert oracle == pytest.approx(0.29637, abs=1e-5)
        assert_close_to_oracle(result, oracle, allowance=1e-3)

    def test_hessian_fk_gaussian(self, flat1, small_mc):
        model, fields = flat1
        f = load_test_function("square:1", model)
        result = estimators.hessian_fk(model, fields, f, 1.0, [0.0], [1.0], [1.0], small_mc)
        assert_close_to_oracle(result, 2.0)
        assert set(result.extras["terms"]) == {"first", "second", "potential"}
        assert result.extras["terms"]["second"] == 0.0

    def test_hessian_matrix(self, small_mc):
        model = load_model("euclidean:2")
        fields = load_fields("zero", "zero", model)
        f = load_test_function("square:1", model)
        exact = estimators.hessian_matrix(model, fields, f, 0.5, [0.1, 0.2], MonteCarloConfig(n_paths=500))
        np.testing.assert_array_equal(exact.mean, [[2.0, 0.0], [0.0, 0.0]])
        assert exact.extras["asymmetry"] == 0.0
        fk = estimators.hessian_matrix(model, fields, f, 0.5, [0.1, 0.2], small_mc, method="fk")
        assert_close_to_oracle(fk, np.array([[2.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(fk.mean, np.asarray(fk.mean).T)

    def test_hessian_matrix_method(self, flat1):
        model, fields = flat1
        with pytest.raises(ConfigError):
            estimators.hessian_matrix(model, fields, load_test_function("square:1", model), 1.0, [0.0], MonteCarloConfig(), "bismut")


class TestPotential:
    def test_hessian_fk_against_finite_differences(self, small_mc):
        model = load_model("euclidean:2")
        fields = load_fields("zero", "cosine:eps=0.2", model)
        f = load_test_function("square:1", model)
        x0, e1 = [0.3, 0.1], np.array([1.0, 0.0])
        mc = MonteCarloConfig(n_paths=20000, seed=7, control_variate=True)
        fk = estimators.hessian_fk(model, fields, f, 0.5, x0, e1, e1, mc)
        fd = estimators.hessian_fd(model, fields, f, 0.5, x0, e1, e1, small_mc)
        combined = np.hypot(fk.stderr, fd.stderr)
        assert abs(fk.mean - fd.mean) <= max(4.0 * combined, 0.03 * abs(fd.mean))
        assert fk.extras["terms"]["potential"] != 0.0
        assert fk.extras["potential_bound"] == pytest.approx(0.2)
        assert fk.extras["holder"] == [1.0, 0.2]

    def test_first_order_estimators_require_zero_potential(self):
        model = load_model("euclidean:1")
        fields = load_fields("zero", "cosine", model)
        f = load_test_function("square:1", model)
        with pytest.raises(CapabilityError):
            estimators.gradient_pathwise(model, fields, f, 1.0, [0.0], [1.0], MonteCarloConfig())
        with pytest.raises(CapabilityError):
            estimators.hessian_elementary(model, fields, f, 1.0, [0.0], [1.0], [1.0], MonteCarloConfig())

    def test_grid_must_split_into_quarters(self, flat1):
        model, fields = flat1
        f = load_test_function("square:1", model)
        with pytest.raises(ConfigError):
            estimators.hessian_fk(model, fields, f, 0.51, [0.0], [1.0], [1.0], MonteCarloConfig())

    def test_non_positive_time(self, flat1):
        model, fields = flat1
        f = load_test_function("square:1", model)
        with pytest.raises(ValueError):
            estimators.feynman_kac(model, fields, f, 0.0, [0.0], MonteCarloConfig())


class TestSphere:
    T = 0.5

    @pytest.mark.parametrize("name", ["feynman_kac", "gradient_pathwise", "hessian_elementary"])
    def test_linear_eigenfunction(self, sphere, small_mc, name):
        model, fields = sphere
        f = load_test_function("linear:3", model)
        call = {
            "feynman_kac": lambda: estimators.feynman_kac(model, fields, f, self.T, SPHERE_X0, small_mc),
            "gradient_pathwise": lambda: estimators.gradient_pathwise(model, fields, f, self.T, SPHERE_X0, SPHERE_V, small_mc),
            "hessian_elementary": lambda: estimators.hessian_elementary(
                model, fields, f, self.T, SPHERE_X0, SPHERE_V, SPHERE_V, small_mc
            ),
        }[name]
        oracle = oracles.lookup_oracle(name, model, fields, f, self.T, SPHERE_X0, SPHERE_V, SPHERE_V)
        assert_close_to_oracle(call(), oracle, allowance=small_mc.dt)

    def test_bismut_with_control_variate(self, sphere):
        model, fields = sphere
        f = load_test_function("linear:3", model)
        mc = MonteCarloConfig(n_paths=20000, seed=7, control_variate=True)
        result = estimators.gradient_bismut(model, fields, f, self.T, SPHERE_X0, SPHERE_V, mc)
        assert_close_to_oracle(result, SQRT_HALF * np.exp(-self.T), allowance=mc.dt)

    def test_doubly_damped_expectation(self, sphere, small_mc):
        model, fields = sphere
        result = estimators.doubly_damped_expectation(model, fields, self.T, SPHERE_X0, SPHERE_V, SPHERE_V, small_mc)
        oracle = oracles.sphere_doubly_damped(model, fields, self.T, SPHERE_X0, SPHERE_V, SPHERE_V)
        assert_close_to_oracle(result, oracle, allowance=small_mc.dt)
        assert result.extras["second_moment"] > 0.0

    def test_transport_derivative_matches_doubly_damped(self, sphere):
        model, fields = sphere
        mc = MonteCarloConfig(n_paths=10000, seed=7)
        result = estimators.transport_derivative_fd(model, fields, self.T, SPHERE_X0, SPHERE_V, SPHERE_V, mc)
        difference = np.abs(result.extras["difference_mean"])
        assert np.all(difference <= 4.0 * np.asarray(result.extras["difference_stderr"]) + 5e-3)


class TestDiagnostics:
    def test_nt_scaling_on_flat_space(self, flat1, small_mc):
        model, fields = flat1
        report = estimators.nt_scaling_diagnostic(model, fields, [0.0], [0.04, 0.08, 0.16, 0.32], small_mc)
        assert report["slope"] == pytest.approx(-1.0, abs=0.1)
        for row in report["rows"]:
            assert abs(row["mean"] - oracles.nt_mean_flat(row["t"], [1.0], [1.0])) <= 4.0 * row["stderr"]

    def test_exponential_constant(self):
        assert estimators.exponential_constant(1.0, 0.0) == 1.0
        assert estimators.exponential_constant(1.0, 1.0) == pytest.approx(np.expm1(3.0) / 3.0)

    def test_alpha_bound(self):
        c1, alpha2 = estimators.alpha_bound(load_model("sphere:r=1"), 1.0)
        assert alpha2 == pytest.approx(1.0 / (49.0 * 4.0 * c1))
        assert estimators.alpha_bound(load_model("euclidean:2"), 1.0) == (1.0, float("inf"))

    def test_alpha_above_bound(self, sphere):
        model, fields = sphere
        with pytest.raises(ConfigError):
            estimators.exp_moment_diagnostic(model, fields, 1.0, [0.01], MonteCarloConfig(n_paths=100))

    def test_flat_moment_is_one(self):
        model = load_model("euclidean:2")
        report = estimators.exp_moment_diagnostic(
            model, load_fields("zero", "zero", model), 0.5, [1.0, 10.0], MonteCarloConfig(n_paths=200)
        )
        assert [row["mean"] for row in report["rows"]] == [1.0, 1.0]
        assert all(row["stable"] for row in report["rows"])

    def test_sphere_moment_at_bound_is_stable(self, sphere):
        model, fields = sphere
        _, alpha2 = estimators.alpha_bound(model, 1.0)
        report = estimators.exp_moment_diagnostic(model, fields, 1.0, [alpha2], MonteCarloConfig(n_paths=10000, batch_size=2500))
        row = report["rows"][0]
        assert row["finite"] and row["stable"]
        assert 1.0 < row["mean"] < 1.01


HEIGHT_X0 = np.array([np.sin(np.pi / 3), 0.0, np.cos(np.pi / 3)])
HEIGHT_V = np.array([np.cos(np.pi / 3), 0.0, -np.sin(np.pi / 3)])


class _Combination(TestFunction):
    def __init__(self, a, f, b, g):
        self.a, self.f, self.b, self.g = a, f, b, g
        self.identifier = "{}*{}+{}*{}".format(a, f.identifier, b, g.identifier)

    def __call__(self, x):
        return self.a * self.f(x) + self.b * self.g(x)

    def _gradient(self, x):
        return self.a * self.f.coordinate_gradient(x) + self.b * self.g.coordinate_gradient(x)

    def _hessian(self, x):
        return self.a * self.f.coordinate_hessian(x) + self.b * self.g.coordinate_hessian(x)


class TestDriftedHessian:
    T = 0.5

    def _compare(self, model, fields, f, x0, v, n_paths):
        mc = MonteCarloConfig(n_paths=n_paths, seed=11)
        fd_mc = MonteCarloConfig(n_paths=n_paths, seed=12)
        elementary = estimators.hessian_elementary(model, fields, f, self.T, x0, v, v, mc)
        reference = estimators.hessian_fd(model, fields, f, self.T, x0, v, v, fd_mc, eps=0.05)
        difference = abs(float(elementary.mean) - float(reference.mean))
        tolerance = 4.0 * np.hypot(elementary.stderr, reference.stderr) + 2e-3 + mc.dt
        assert difference <= tolerance, (elementary.mean, reference.mean, tolerance)

    def test_sphere_with_height_drift(self):
        model = load_model("sphere:r=1")
        fields = load_fields("height:c=1,axis=3", "zero", model)
        f = load_test_function("linear:1", model)
        self._compare(model, fields, f, HEIGHT_X0, HEIGHT_V, 20000)

    def test_bump_metric(self):
        model = load_model("bump")
        fields = load_fields("zero", "zero", model)
        f = load_test_function("square:1", model)
        x0 = model.default_point()
        v = model.initial_frame(x0)[:, 0]
        self._compare(model, fields, f, x0, v, 40000)

    def test_hessian_fk_on_sphere(self, sphere):
        model, fields = sphere
        f = load_test_function("linear:3", model)
        mc = MonteCarloConfig(n_paths=20000, seed=7, control_variate=True)
        result = estimators.hessian_fk(model, fields, f, self.T, SPHERE_X0, SPHERE_V, SPHERE_V, mc)
        oracle = oracles.lookup_oracle("hessian_fk", model, fields, f, self.T, SPHERE_X0, SPHERE_V, SPHERE_V)
        assert_close_to_oracle(result, oracle, allowance=mc.dt)


class TestLinearityInF:
    @pytest.mark.parametrize("name", ["feynman_kac", "gradient_pathwise", "hessian_elementary", "hessian_fk"])
    def test_common_random_numbers(self, name):
        model = load_model("sphere:r=1")
        fields = load_fields("height:c=1,axis=3", "zero", model)
        f = load_test_function("linear:1", model)
        g = load_test_function("square:3", model)
        mc = MonteCarloConfig(n_paths=2000, seed=5)
        estimator = estimators.ESTIMATORS[name]

        def run(function):
            if name == "feynman_kac":
                return float(estimator(model, fields, function, 0.5, HEIGHT_X0, mc).mean)
            if name == "gradient_pathwise":
                return float(estimator(model, fields, function, 0.5, HEIGHT_X0, HEIGHT_V, mc).mean)
            return float(estimator(model, fields, function, 0.5, HEIGHT_X0, HEIGHT_V, HEIGHT_V, mc).mean)

        combined = run(_Combination(2.0, f, -3.0, g))
        assert combined == pytest.approx(2.0 * run(f) - 3.0 * run(g), rel=1e-9, abs=1e-12)


class TestExpMomentDoubling:
    def test_single_batch_is_split_by_path(self, sphere):
        model, fields = sphere
        _, alpha2 = estimators.alpha_bound(model, 1.0)
        report = estimators.exp_moment_diagnostic(
            model, fields, 1.0, [alpha2], MonteCarloConfig(n_paths=300, batch_size=5000)
        )
        row = report["rows"][0]
        assert row["half_mean"] != row["mean"]
        assert row["doubling_change"] > 0.0

    def test_dominant_path_is_unstable(self):
        samples = np.ones((300, 1))
        samples[-1] = 1e6
        merged = {key: MomentAccumulator.from_samples(value) for key, value in split_halves(samples).items()}
        row = estimators.exp_moment_rows([1.0], merged)[0]
        assert row["half_mean"] == pytest.approx(1.0)
        assert not row["doubling_stable"]
        assert row["max_term_share"] > 0.5
        assert not row["stable"]


class TestBounds:
    @pytest.mark.parametrize(
        "identifier, drift, function",
        [
            ("sphere:r=1", "height:c=1,axis=3", "linear:1"),
            ("bump", "zero", "sine:1"),
            ("euclidean:1", "quadratic:c=1", "sine:1"),
        ],
    )
    def test_bounds_hold(self, identifier, drift, function):
        model = load_model(identifier)
        fields = load_fields(drift, "zero", model)
        f = load_test_function(function, model)
        x0 = model.default_point()
        v = model.initial_frame(x0)[:, 0]
        report = estimators.bound_diagnostic(model, fields, f, 0.5, x0, v, v, MonteCarloConfig(n_paths=2000, seed=3))
        assert report["passed"], report["checks"]
        assert report["n_paths"] == 2000

    def test_sphere_damped_norm_is_exact(self, sphere):
        model, fields = sphere
        f = load_test_function("linear:3", model)
        report = estimators.bound_diagnostic(
            model, fields, f, 0.5, SPHERE_X0, SPHERE_V, SPHERE_V, MonteCarloConfig(n_paths=500)
        )
        assert report["rho_bar"] == pytest.approx(-0.5)
        assert report["checks"]["damped_norm"]["max"] == pytest.approx(np.exp(-0.25), abs=1e-8)
