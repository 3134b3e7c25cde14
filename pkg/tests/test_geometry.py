import numpy as np
import pytest

from catalog import parse_catalog_id
from errors import CapabilityError, CatalogError, DimensionError, VerificationError
from geometry import (
    BUILTIN_MODEL_IDS,
    Sphere,
    builtin_models,
    check_condition_c1,
    load_model,
    rho_bar,
    second_covariant_fd,
    theta,
    theta_h,
    theta_vector,
    verify_connection,
    verify_curvature,
)
from potentials import load_fields


class TestCatalog:
    def test_parse_positional_and_keyword_arguments(self):
        assert parse_catalog_id("sphere:r=2,n=3") == ("sphere", [], {"r": 2, "n": 3})
        assert parse_catalog_id("euclidean:2") == ("euclidean", [2], {})
        assert parse_catalog_id("cosine:eps=0.2") == ("cosine", [], {"eps": 0.2})

    def test_unknown_model_id(self):
        with pytest.raises(CatalogError):
            load_model("torus:r=1")

    def test_bad_arguments(self):
        with pytest.raises(CatalogError):
            load_model("sphere:radius=1")

    def test_empty_id(self):
        with pytest.raises(CatalogError):
            load_model("")

    def test_builtin_catalog(self):
        catalog = builtin_models()
        assert list(catalog["models"]) == BUILTIN_MODEL_IDS
        assert "quadratic" in catalog["drifts"]
        assert "cosine" in catalog["potentials"]


class TestVerification:
    @pytest.mark.parametrize("identifier", BUILTIN_MODEL_IDS)
    def test_connection_matches_metric(self, identifier):
        report = verify_connection(load_model(identifier), n_points=50)
        assert report["passed"]
        assert set(report["checks"]) == {"christoffel", "metric_compatibility"}

    @pytest.mark.parametrize("identifier", BUILTIN_MODEL_IDS)
    def test_curvature_identities(self, identifier):
        report = verify_curvature(load_model(identifier), n_points=200)
        assert report["passed"], report["checks"]

    @pytest.mark.parametrize("identifier", ["sphere:r=1", "hyperbolic:r=1", "bump:a=0.3,s=1"])
    def test_flipped_curvature_sign_is_detected(self, identifier):
        model = load_model(identifier, curvature_sign=-1.0)
        with pytest.raises(VerificationError) as info:
            verify_curvature(model, n_points=200)
        failed = [name for name, check in info.value.report["checks"].items() if not check["passed"]]
        assert "ricci_trace" in failed
        assert "riemann_fd" in failed

    def test_report_without_raising(self):
        model = load_model("sphere:r=1", curvature_sign=-1.0)
        report = verify_curvature(model, n_points=100, raise_on_failure=False)
        assert not report["passed"]
        assert report["max_deviation"] > 1e-3

    def test_euclidean_is_exactly_flat(self):
        model = load_model("euclidean:3")
        x = model.sample_points(np.random.default_rng(0), 10)
        u = np.ones((10, 3))
        assert not np.any(model.christoffel(x))
        assert not np.any(model.riemann(x, u, u, u))
        assert not np.any(model.ricci_form(x))


class TestSphere:
    def test_initial_frame_is_orthonormal_and_tangent(self):
        model = Sphere(r=2.0, n=3)
        x = model.sample_points(np.random.default_rng(1), 100)
        u = model.initial_frame(x)
        assert u.shape == (100, 4, 3)
        assert model.frame_defect(x, u) < 1e-12
        np.testing.assert_allclose(np.einsum("pi,pic->pc", x, u), 0.0, atol=1e-12)

    def test_frame_at_pole(self):
        model = load_model("sphere:r=1")
        u = model.initial_frame(model.default_point())
        np.testing.assert_allclose(u, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], atol=1e-15)

    def test_non_tangent_vector(self):
        model = load_model("sphere:r=1")
        with pytest.raises(DimensionError):
            model.check_tangent(model.default_point(), [0.0, 0.0, 1.0])

    def test_wrong_dimension(self):
        model = load_model("sphere:r=1")
        with pytest.raises(DimensionError):
            model.check_point([0.0, 1.0])

    def test_chart_christoffel_unavailable(self):
        with pytest.raises(CapabilityError):
            load_model("sphere:r=1").christoffel(np.array([0.0, 0.0, 1.0]))

    def test_geodesic_transport_keeps_point_on_sphere(self):
        model = Sphere(r=1.5)
        x = np.array([0.0, 0.0, 1.5])
        v = np.array([1.0, 0.0, 0.0])
        point, transport = model.geodesic_transport(x, v, 1.5 * np.pi / 2)
        np.testing.assert_allclose(point, [1.5, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(transport @ v, [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(transport.T @ transport, np.eye(3), atol=1e-12)

    def test_second_covariant_derivative_of_height_gradient(self):
        model = load_model("sphere:r=1")
        fields = load_fields("height:c=1,axis=3", "zero", model)
        rng = np.random.default_rng(3)
        x = model.sample_points(rng, 1)[0]
        a, b = model.random_tangent(rng, x), model.random_tangent(rng, x)
        fd = second_covariant_fd(model, fields.grad_h, x, a, b)
        np.testing.assert_allclose(fd, fields.second_grad_h(x, a, b), atol=1e-5)


class TestTheta:
    @pytest.mark.parametrize("identifier", ["euclidean:2", "sphere:r=1", "hyperbolic:r=1"])
    def test_vanishes_on_constant_curvature(self, identifier):
        model = load_model(identifier)
        rng = np.random.default_rng(0)
        x = model.sample_points(rng, 20)
        vectors = [model.random_tangent(rng, x) for _ in range(3)]
        np.testing.assert_allclose(theta(model, x, *vectors), 0.0, atol=1e-14)
        fields = load_fields("zero", "zero", model)
        np.testing.assert_allclose(theta_h(model, fields, x, vectors[0], vectors[1]), 0.0, atol=1e-14)

    def test_nonzero_on_bump_surface(self):
        model = load_model("bump:a=0.3,s=1")
        rng = np.random.default_rng(0)
        x = model.sample_points(rng, 20)
        vectors = [model.random_tangent(rng, x) for _ in range(3)]
        assert np.max(np.abs(theta(model, x, *vectors))) > 1e-3

    @pytest.mark.parametrize("slot", [0, 1, 2])
    def test_trilinear(self, slot):
        model = load_model("bump:a=0.3,s=1")
        rng = np.random.default_rng(1)
        x = model.sample_points(rng, 20)
        vectors = [model.random_tangent(rng, x) for _ in range(3)]
        other = model.random_tangent(rng, x)

        def with_slot(value):
            args = list(vectors)
            args[slot] = value
            return theta(model, x, *args)

        combined = with_slot(0.7 * vectors[slot] - 1.3 * other)
        np.testing.assert_allclose(combined, 0.7 * with_slot(vectors[slot]) - 1.3 * with_slot(other), atol=1e-12)

    def test_vector_is_the_metric_dual(self):
        model = load_model("bump:a=0.3,s=1")
        rng = np.random.default_rng(2)
        x = model.sample_points(rng, 20)
        v1, v2, w = (model.random_tangent(rng, x) for _ in range(3))
        dual = theta_vector(model, x, v2, v1)
        np.testing.assert_allclose(model.inner(x, dual, w), theta(model, x, v1, v2, w), atol=1e-12)

    def test_theta_h_without_drift_is_half_theta(self):
        model = load_model("bump:a=0.3,s=1")
        rng = np.random.default_rng(3)
        x = model.sample_points(rng, 20)
        v1, v2 = model.random_tangent(rng, x), model.random_tangent(rng, x)
        value = theta_h(model, load_fields("zero", "zero", model), x, v2, v1)
        np.testing.assert_array_equal(value, 0.5 * theta_vector(model, x, v2, v1))
        assert np.max(np.abs(value)) > 1e-4

    def test_theta_h_of_height_drift_on_sphere(self):
        model = load_model("sphere:r=1")
        fields = load_fields("height:c=1,axis=3", "zero", model)
        x = np.array([1.0, 0.0, 0.0])
        e3 = np.array([0.0, 0.0, 1.0])
        expected = second_covariant_fd(model, fields.grad_h, x, e3, e3) + model.riemann(x, fields.grad_h(x), e3, e3)
        value = theta_h(model, fields, x, e3, e3)
        np.testing.assert_allclose(value, expected, atol=1e-5)
        np.testing.assert_allclose(value, -e3, atol=1e-12)


class TestChartGeodesics:
    def test_radial_geodesic_in_the_disk(self):
        model = load_model("hyperbolic:r=1")
        point, transport = model.geodesic_transport(np.zeros(2), np.array([0.5, 0.0]), 1.0)
        rho = np.tanh(0.5)
        np.testing.assert_allclose(point, [rho, 0.0], atol=1e-8)
        np.testing.assert_allclose(transport @ np.array([1.0, 0.0]), [1.0 - rho ** 2, 0.0], atol=1e-8)

    def test_transport_is_an_isometry_on_the_bump(self):
        model = load_model("bump:a=0.3,s=1")
        y = model.default_point()
        point, transport = model.geodesic_transport(y, np.array([0.3, -0.4]), 0.7)
        np.testing.assert_allclose(transport.T @ model.metric(point) @ transport, model.metric(y), atol=1e-8)
        assert not np.allclose(point, y + 0.7 * np.array([0.3, -0.4]), atol=1e-3)

    def test_flat_bump_is_a_straight_line(self):
        model = load_model("bump:a=0,s=1")
        point, transport = model.geodesic_transport(np.array([0.2, 0.1]), np.array([1.0, 2.0]), 0.5)
        np.testing.assert_allclose(point, [0.7, 1.1], atol=1e-12)
        np.testing.assert_allclose(transport, np.eye(2), atol=1e-12)


class TestScalarFields:
    def test_quadratic_well_against_finite_differences(self):
        model = load_model("euclidean:2")
        fields = load_fields("quadratic:c=1.5", "zero", model)
        x = np.array([0.4, -0.7])
        step = 1e-4
        eye = np.eye(2)
        grad = [(fields.h(x + step * e) - fields.h(x - step * e)) / (2.0 * step) for e in eye]
        hess = [
            [
                (fields.h(x + step * (a + b)) - fields.h(x + step * (a - b)) - fields.h(x - step * (a - b)) + fields.h(x - step * (a + b)))
                / (4.0 * step ** 2)
                for b in eye
            ]
            for a in eye
        ]
        np.testing.assert_allclose(fields.grad_h(x), grad, atol=1e-8)
        np.testing.assert_allclose(fields.hess_h(x), hess, atol=1e-6)

    def test_height_against_geodesic_differences(self):
        model = load_model("sphere:r=1")
        fields = load_fields("height:c=0.8,axis=3", "zero", model)
        rng = np.random.default_rng(4)
        step = 1e-4
        for x in model.sample_points(rng, 5):
            v = model.random_tangent(rng, x)
            v /= np.linalg.norm(v)
            forward, _ = model.geodesic_transport(x, v, step)
            backward, _ = model.geodesic_transport(x, v, -step)
            h_plus, h0, h_minus = fields.h(forward), fields.h(x), fields.h(backward)
            assert (h_plus - h_minus) / (2.0 * step) == pytest.approx(fields.grad_h(x) @ v, abs=1e-7)
            assert (h_plus - 2.0 * h0 + h_minus) / step ** 2 == pytest.approx(v @ fields.hess_h(x) @ v, abs=1e-5)

    @pytest.mark.parametrize("identifier", ["euclidean:2", "sphere:r=1", "bump:a=0.3,s=1"])
    @pytest.mark.parametrize("potential", ["zero", "constant:c=0.7", "cosine:eps=0.3", "cosine:eps=0.2,axis=2"])
    def test_potential_within_its_bound(self, identifier, potential):
        model = load_model(identifier)
        fields = load_fields("zero", potential, model)
        x = model.sample_points(np.random.default_rng(5), 500)
        assert np.all(np.abs(fields.V(x)) <= fields.V_bound)

    def test_holder_metadata(self):
        model = load_model("euclidean:1")
        assert load_fields("zero", "cosine:eps=0.3", model).holder == (1.0, 0.3)
        assert load_fields("zero", "constant:c=2", model).holder == (1.0, 0.0)


class TestConditionC1:
    @pytest.mark.parametrize("identifier", BUILTIN_MODEL_IDS)
    def test_builtin_bounds_hold_without_drift(self, identifier):
        model = load_model(identifier)
        result = check_condition_c1(model, load_fields("zero", "zero", model), n_points=100)
        assert result["satisfied"]

    def test_rho_bar(self):
        sphere = load_model("sphere:r=1")
        assert rho_bar(sphere, load_fields("zero", "zero", sphere)) == pytest.approx(-0.5)
        flat = load_model("euclidean:1")
        assert rho_bar(flat, load_fields("quadratic:c=2", "zero", flat)) == pytest.approx(-2.0)

    def test_field_restricted_to_model_family(self):
        with pytest.raises(CapabilityError):
            load_fields("height", "zero", load_model("euclidean:2"))

    def test_quadratic_drift_widens_the_margin(self):
        model = load_model("euclidean:2")
        result = check_condition_c1(model, load_fields("quadratic:c=2", "zero", model), n_points=50)
        assert result["satisfied"]
        assert result["margin"] == pytest.approx(4.0)

    @pytest.mark.parametrize("c, satisfied", [(0.25, True), (2.0, False)])
    def test_height_drift_on_sphere(self, c, satisfied):
        model = load_model("sphere:r=1")
        fields = load_fields("height:c={},axis=3".format(c), "zero", model)
        result = check_condition_c1(model, fields, points=[[0.0, 0.0, -1.0]])
        # Ric - 2 Hess h = (1 + 2c x_3) g
        assert result["min_eigenvalue"] == pytest.approx(1.0 - 2.0 * c)
        assert result["satisfied"] is satisfied
