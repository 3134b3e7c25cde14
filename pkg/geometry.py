# Copyright 2026 The damped-transport-mc Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Manifold models with analytic metric, connection and curvature.

Points are arrays of shape ``(..., d)`` where ``d`` is the number of
simulation coordinates (chart coordinates for intrinsic models, ambient
coordinates for extrinsic ones). Frames are arrays of shape ``(..., d, n)``
whose columns are tangent vectors, orthonormal in the metric.

Curvature convention: R(u,v)w = ∇_u∇_v w - ∇_v∇_u w - ∇_[u,v] w, so a round
sphere has positive sectional curvature. Christoffel symbols are indexed
``gamma[..., i, j, k] = Γ^i_jk``.
"""

import numpy as np
from logzero import logger
from scipy.integrate import solve_ivp

from catalog import build_from_catalog
from errors import CapabilityError, DimensionError, IntegrationError, VerificationError


FD_STEP = 1e-4
FD_TOLERANCE = 1e-6
BOUNDARY_GUARD = 1e-6


def _sum_last(a, b):
    return np.sum(a * b, axis=-1)


class ManifoldModel(object):
    """Common interface of the built-in models."""

    name = None
    family = None
    representation = None
    domain = None
    dim = None
    coord_dim = None
    ambient_dim = None
    sup_norm_R = 0.0
    lower_bound_K = 0.0
    ricci_lower = 0.0
    curvature_sign = 1.0

    def __repr__(self):
        return "{}({})".format(type(self).__name__, self.name)

    def metric(self, x):
        raise NotImplementedError

    def inner(self, x, a, b):
        return np.einsum("...i,...ij,...j->...", a, self.metric(x), b)

    def norm(self, x, a):
        return np.sqrt(self.inner(x, a, a))

    def sharp(self, x, covector):
        return np.linalg.solve(self.metric(x), covector[..., None])[..., 0]

    def gradient(self, x, dF):
        """Riemannian gradient of a function from its coordinate differential."""
        return self.sharp(x, dF)

    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.coord_dim,):
            raise DimensionError(
                "Point of shape {} does not match model '{}' with {} coordinates".format(
                    x.shape, self.name, self.coord_dim
                )
            )
        return x

    def check_tangent(self, x, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1:] != (self.coord_dim,):
            raise DimensionError(
                "Vector of shape {} does not match model '{}' with {} coordinates".format(
                    v.shape, self.name, self.coord_dim
                )
            )
        return v

    def in_domain(self, x):
        return np.all(np.isfinite(x), axis=-1)

    def default_point(self):
        return np.zeros(self.coord_dim)

    def sample_points(self, rng, n_points):
        raise NotImplementedError

    def random_tangent(self, rng, x):
        return rng.standard_normal(np.shape(x))

    def initial_frame(self, x):
        raise NotImplementedError

    def orthonormalize(self, x, u):
        """Modified Gram-Schmidt on the columns of u in the metric at x."""
        u = np.array(u, dtype=float, copy=True)
        for j in range(u.shape[-1]):
            column = u[..., :, j]
            for i in range(j):
                previous = u[..., :, i]
                column = column - self.inner(x, previous, column)[..., None] * previous
            u[..., :, j] = column / self.norm(x, column)[..., None]
        return u

    def frame_defect(self, x, u):
        """max |uᵀ g u - Id| over the batch."""
        gram = np.einsum("...ia,...ij,...jb->...ab", u, self.metric(x), u)
        return float(np.max(np.abs(gram - np.eye(u.shape[-1]))))

    def christoffel(self, x):
        raise CapabilityError("Model '{}' has no chart Christoffel symbols".format(self.name))

    def transport_correction(self, x, u, dx):
        """du = -Γ(u, dx) for every frame column."""
        return -np.einsum("...ijk,...jc,...k->...ic", self.christoffel(x), u, dx)

    def retract(self, x, u):
        return x, self.orthonormalize(x, u)

    def riemann(self, x, u, v, w):
        raise NotImplementedError

    def ricci_sharp(self, x):
        raise NotImplementedError

    def ricci_form(self, x):
        return self.metric(x) @ self.ricci_sharp(x)

    def nabla_ricci(self, x, a, b, c):
        raise NotImplementedError

    def covariant_hessian(self, x, dF, hess):
        """∇df as a matrix acting on simulation-coordinate tangent vectors."""
        return hess - np.einsum("...kij,...k->...ij", self.christoffel(x), dF)

    def tangent_projector(self, x):
        raise CapabilityError("Model '{}' has no embedding gradient family X(x)".format(self.name))

    def geodesic_transport(self, x, v, eps):
        raise CapabilityError("Model '{}' has no closed-form geodesics".format(self.name))

    def chart(self):
        return self


class ConformalChart(ManifoldModel):
    """A chart with metric e^{2φ(y)}δ on a domain of R^n.

    Subclasses provide φ, dφ, Hess φ and the sectional curvature K(y) with
    its differential. The Riemann formula R(u,v)w = K(⟨v,w⟩u - ⟨u,w⟩v) holds
    on every surface and on constant curvature spaces of any dimension.
    """

    representation = "intrinsic"
    sample_radius = 1.0

    def phi(self, y):
        raise NotImplementedError

    def dphi(self, y):
        raise NotImplementedError

    def hess_phi(self, y):
        raise NotImplementedError

    def curvature(self, y):
        raise NotImplementedError

    def dcurvature(self, y):
        return np.zeros_like(y)

    def conformal_factor(self, y):
        return np.exp(2.0 * self.phi(y))

    def metric(self, y):
        return self.conformal_factor(y)[..., None, None] * np.eye(self.dim)

    def inner(self, y, a, b):
        return self.conformal_factor(y) * _sum_last(a, b)

    def sharp(self, y, covector):
        return covector / self.conformal_factor(y)[..., None]

    def sample_points(self, rng, n_points):
        direction = rng.standard_normal((n_points, self.dim))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = self.sample_radius * rng.uniform(size=(n_points, 1)) ** (1.0 / self.dim)
        return direction * radius

    def initial_frame(self, y):
        y = np.asarray(y, dtype=float)
        scale = np.exp(-self.phi(y))
        return scale[..., None, None] * np.broadcast_to(np.eye(self.dim), y.shape + (self.dim,))

    def christoffel(self, y):
        d = self.dphi(y)
        eye = np.eye(self.dim)
        # Γ^i_jk = δ_ij ∂_kφ + δ_ik ∂_jφ - δ_jk ∂_iφ
        return (
            np.einsum("ij,...k->...ijk", eye, d)
            + np.einsum("ik,...j->...ijk", eye, d)
            - np.einsum("jk,...i->...ijk", eye, d)
        )

    def transport_correction(self, y, u, dy):
        d = self.dphi(y)
        u_dphi = np.einsum("...ic,...i->...c", u, d)
        u_dy = np.einsum("...ic,...i->...c", u, dy)
        return -(
            u * _sum_last(d, dy)[..., None, None]
            + dy[..., :, None] * u_dphi[..., None, :]
            - d[..., :, None] * u_dy[..., None, :]
        )

    def geodesic_transport(self, y, v, eps):
        """exp_y(eps·v) and the parallel transport matrix, by integrating the geodesic equation."""
        y = self.check_point(y)
        v = self.check_tangent(y, v)
        n = self.dim

        def rhs(s, state):
            point, velocity = state[:n], state[n : 2 * n]
            frame = state[2 * n :].reshape(n, n)
            gamma = self.christoffel(point[None])[0]
            acceleration = -np.einsum("ijk,j,k->i", gamma, velocity, velocity)
            dframe = -np.einsum("ijk,jc,k->ic", gamma, frame, velocity)
            return np.concatenate([velocity, acceleration, dframe.ravel()])

        start = np.concatenate([y, v, np.eye(n).ravel()])
        solution = solve_ivp(rhs, (0.0, eps), start, method="DOP853", rtol=1e-11, atol=1e-13)
        if not solution.success:
            raise IntegrationError("Geodesic from {} on '{}' failed: {}".format(y.tolist(), self.name, solution.message))
        end = solution.y[:, -1]
        return end[:n], end[2 * n :].reshape(n, n)

    def riemann(self, y, u, v, w):
        k = self.curvature_sign * self.curvature(y)[..., None]
        return k * (self.inner(y, v, w)[..., None] * u - self.inner(y, u, w)[..., None] * v)

    def ricci_sharp(self, y):
        k = (self.dim - 1) * self.curvature(y)
        return k[..., None, None] * np.eye(self.dim)

    def nabla_ricci(self, y, a, b, c):
        # Ric = (n-1)K g, so ∇_a Ric = (n-1) dK(a) g
        return (self.dim - 1) * _sum_last(self.dcurvature(y), a) * self.inner(y, b, c)


class EuclideanSpace(ConformalChart):
    family = "euclidean"

    def __init__(self, n=2):
        n = int(n)
        if n not in (1, 2, 3):
            raise ValueError("Euclidean dimension must be 1, 2 or 3, got {}".format(n))
        self.dim = self.coord_dim = self.ambient_dim = n
        self.name = "euclidean:{}".format(n)
        self.domain = "R^{}".format(n)

    def phi(self, y):
        return np.zeros(np.shape(y)[:-1])

    def dphi(self, y):
        return np.zeros_like(y)

    def hess_phi(self, y):
        return np.zeros(np.shape(y) + (self.dim,))

    def curvature(self, y):
        return np.zeros(np.shape(y)[:-1])

    def christoffel(self, y):
        return np.zeros(np.shape(y) + (self.dim, self.dim))

    def transport_correction(self, y, u, dy):
        return np.zeros_like(u)

    def riemann(self, y, u, v, w):
        return np.zeros(np.broadcast(u, v, w).shape)

    def ricci_sharp(self, y):
        return np.zeros(np.shape(y) + (self.dim,))

    def nabla_ricci(self, y, a, b, c):
        return np.zeros(np.broadcast(a, b, c).shape[:-1])

    def covariant_hessian(self, y, dF, hess):
        return hess

    def retract(self, y, u):
        return y, u

    def tangent_projector(self, y):
        return np.broadcast_to(np.eye(self.dim), np.shape(y) + (self.dim,))

    def geodesic_transport(self, y, v, eps):
        transport = np.broadcast_to(np.eye(self.dim), np.shape(y) + (self.dim,))
        return y + eps * v, transport


class SpaceFormChart(ConformalChart):
    """Metric 4r⁴/(r² + s|y|²)² δ of constant curvature s/r².

    s = -1 is the Poincaré ball of radius r, s = +1 the stereographic chart
    of the round sphere of radius r.
    """

    def __init__(self, r=1.0, n=2, sign=-1.0):
        self.r = self.radius = float(r)
        self.sign = float(sign)
        n = int(n)
        if n not in (2, 3):
            raise ValueError("Space form dimension must be 2 or 3, got {}".format(n))
        if self.r <= 0.0:
            raise ValueError("Radius must be positive, got {}".format(r))
        self.dim = self.coord_dim = n
        self.k = self.sign / self.r ** 2
        self.sup_norm_R = 1.0 / self.r ** 2
        self.lower_bound_K = 1.0 / self.r ** 2
        self.ricci_lower = (n - 1) * self.k

    def _denominator(self, y):
        return self.r ** 2 + self.sign * np.sum(y * y, axis=-1)

    def phi(self, y):
        return np.log(2.0 * self.r ** 2 / self._denominator(y))

    def dphi(self, y):
        return -2.0 * self.sign * y / self._denominator(y)[..., None]

    def hess_phi(self, y):
        D = self._denominator(y)[..., None, None]
        outer = y[..., :, None] * y[..., None, :]
        return -2.0 * self.sign * np.eye(self.dim) / D + 4.0 * outer / D ** 2

    def curvature(self, y):
        return np.full(np.shape(y)[:-1], self.k)

    def nabla_ricci(self, y, a, b, c):
        return np.zeros(np.broadcast(a, b, c).shape[:-1])


class HyperbolicDisk(SpaceFormChart):
    family = "hyperbolic"

    def __init__(self, r=1.0, n=2):
        super().__init__(r=r, n=n, sign=-1.0)
        self.name = "hyperbolic:r={},n={}".format(self.r, self.dim)
        self.domain = "|y| < {}".format(self.r * (1.0 - BOUNDARY_GUARD))
        self.sample_radius = 0.4 * self.r

    def in_domain(self, y):
        inside = np.linalg.norm(y, axis=-1) < self.r * (1.0 - BOUNDARY_GUARD)
        return inside & np.all(np.isfinite(y), axis=-1)


class StereographicSphereChart(SpaceFormChart):
    family = "sphere-chart"

    def __init__(self, r=1.0, n=2):
        super().__init__(r=r, n=n, sign=1.0)
        self.name = "sphere-chart:r={},n={}".format(self.r, self.dim)
        self.domain = "R^{}".format(self.dim)
        self.sample_radius = self.r


class BumpSurface(ConformalChart):
    """R² with metric e^{2φ}δ, φ(y) = a·exp(-|y|²/2s²).

    Curvature K = -e^{-2φ}Δφ is not constant, so ∇Ric and Θ do not vanish.
    """

    family = "bump"

    def __init__(self, a=0.3, s=1.0):
        self.a = float(a)
        self.s = float(s)
        if self.s <= 0.0:
            raise ValueError("Bump width must be positive, got {}".format(s))
        self.dim = self.coord_dim = 2
        self.name = "bump:a={},s={}".format(self.a, self.s)
        self.domain = "R^2"
        self.sample_radius = 2.0 * self.s
        # |Δφ| ≤ 2|a|/s² and e^{-2φ} ≤ max(1, e^{-2a})
        self.sup_norm_R = 2.0 * abs(self.a) / self.s ** 2 * max(1.0, np.exp(-2.0 * self.a))
        self.lower_bound_K = self.sup_norm_R
        self.ricci_lower = -self.sup_norm_R

    def default_point(self):
        return np.array([0.5 * self.s, 0.0])

    def _gaussian(self, y):
        return np.exp(-np.sum(y * y, axis=-1) / (2.0 * self.s ** 2))

    def phi(self, y):
        return self.a * self._gaussian(y)

    def dphi(self, y):
        return -(self.a * self._gaussian(y) / self.s ** 2)[..., None] * y

    def hess_phi(self, y):
        aE = (self.a * self._gaussian(y))[..., None, None]
        outer = y[..., :, None] * y[..., None, :]
        return aE * (outer / self.s ** 4 - np.eye(2) / self.s ** 2)

    def laplacian_phi(self, y):
        r2 = np.sum(y * y, axis=-1)
        return self.a * self._gaussian(y) * (r2 / self.s ** 4 - 2.0 / self.s ** 2)

    def curvature(self, y):
        return -np.exp(-2.0 * self.phi(y)) * self.laplacian_phi(y)

    def dcurvature(self, y):
        r2 = np.sum(y * y, axis=-1)
        grad_lap = (self.a * self._gaussian(y) * (4.0 - r2 / self.s ** 2) / self.s ** 4)[..., None] * y
        lap = self.laplacian_phi(y)[..., None]
        return -np.exp(-2.0 * self.phi(y))[..., None] * (grad_lap - 2.0 * lap * self.dphi(y))


class Sphere(ManifoldModel):
    """Round sphere S^n(r) embedded in R^{n+1}.

    Tangent vectors are ambient vectors orthogonal to x, the metric is the
    ambient dot product and X(x) is the orthogonal projection P(x).
    """

    family = "sphere"
    representation = "extrinsic"

    def __init__(self, r=1.0, n=2, proj_guard=0.1):
        self.r = self.radius = float(r)
        n = int(n)
        if n not in (2, 3):
            raise ValueError("Sphere dimension must be 2 or 3, got {}".format(n))
        if self.r <= 0.0:
            raise ValueError("Radius must be positive, got {}".format(r))
        self.dim = n
        self.coord_dim = self.ambient_dim = n + 1
        self.proj_guard = float(proj_guard)
        self.name = "sphere:r={},n={}".format(self.r, n)
        self.domain = "|x| = {} in R^{}".format(self.r, n + 1)
        self.k = 1.0 / self.r ** 2
        self.sup_norm_R = self.k
        self.lower_bound_K = self.k
        self.ricci_lower = (n - 1) * self.k

    def metric(self, x):
        return np.broadcast_to(np.eye(self.coord_dim), np.shape(x) + (self.coord_dim,))

    def inner(self, x, a, b):
        return _sum_last(a, b)

    def tangent_projector(self, x):
        r2 = np.sum(x * x, axis=-1)[..., None, None]
        return np.eye(self.coord_dim) - x[..., :, None] * x[..., None, :] / r2

    def project(self, x, v):
        return v - (_sum_last(x, v) / np.sum(x * x, axis=-1))[..., None] * x

    def sharp(self, x, covector):
        return self.project(x, covector)

    def check_tangent(self, x, v):
        v = super().check_tangent(x, v)
        x = np.asarray(x, dtype=float)
        normal = np.abs(_sum_last(x, v))
        if np.any(normal > 1e-8 * self.r * (1.0 + np.linalg.norm(v, axis=-1))):
            raise DimensionError("Vector is not tangent to '{}' at the given point".format(self.name))
        return v

    def in_domain(self, x):
        distance = np.abs(np.linalg.norm(x, axis=-1) - self.r)
        return (distance <= self.proj_guard * self.r) & np.all(np.isfinite(x), axis=-1)

    def default_point(self):
        x = np.zeros(self.coord_dim)
        x[-1] = self.r
        return x

    def sample_points(self, rng, n_points):
        x = rng.standard_normal((n_points, self.coord_dim))
        return self.r * x / np.linalg.norm(x, axis=-1, keepdims=True)

    def random_tangent(self, rng, x):
        return self.project(x, rng.standard_normal(np.shape(x)))

    def initial_frame(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            return np.stack([self.initial_frame(point) for point in x.reshape(-1, self.coord_dim)]).reshape(
                x.shape + (self.dim,)
            )
        # drop the axis most aligned with x, project the rest
        axes = np.argsort(np.abs(x))[: self.dim]
        u = self.tangent_projector(x)[:, np.sort(axes)]
        return self.orthonormalize(x, u)

    def orthonormalize(self, x, u):
        r2 = np.sum(x * x, axis=-1)[..., None, None]
        u = u - x[..., :, None] * np.einsum("...i,...ic->...c", x, u)[..., None, :] / r2
        return super().orthonormalize(x, u)

    def transport_correction(self, x, u, dx):
        r2 = np.sum(x * x, axis=-1)
        u_dx = np.einsum("...ic,...i->...c", u, dx)
        return -x[..., :, None] * (u_dx / r2[..., None])[..., None, :]

    def retract(self, x, u):
        x = self.r * x / np.linalg.norm(x, axis=-1, keepdims=True)
        return x, self.orthonormalize(x, u)

    def riemann(self, x, u, v, w):
        k = self.curvature_sign * self.k
        return k * (_sum_last(v, w)[..., None] * u - _sum_last(u, w)[..., None] * v)

    def ricci_sharp(self, x):
        return (self.dim - 1) * self.k * self.tangent_projector(x)

    def ricci_form(self, x):
        return self.ricci_sharp(x)

    def nabla_ricci(self, x, a, b, c):
        return np.zeros(np.broadcast(a, b, c).shape[:-1])

    def gradient(self, x, dF):
        return self.project(x, dF)

    def covariant_hessian(self, x, dF, hess):
        P = self.tangent_projector(x)
        shift = (_sum_last(dF, x) / np.sum(x * x, axis=-1))[..., None, None] * np.eye(self.coord_dim)
        return P @ (hess - shift) @ P

    def geodesic_transport(self, x, v, eps):
        """exp_x(eps·v) and the parallel transport matrix along the geodesic."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = np.linalg.norm(v, axis=-1)
        x_hat = x / np.linalg.norm(x, axis=-1, keepdims=True)
        e = v / np.where(speed > 0.0, speed, 1.0)[..., None]
        angle = (eps * speed / self.r)[..., None, None]
        plane = x_hat[..., :, None] * x_hat[..., None, :] + e[..., :, None] * e[..., None, :]
        rotation = e[..., :, None] * x_hat[..., None, :] - x_hat[..., :, None] * e[..., None, :]
        transport = np.eye(self.coord_dim) + (np.cos(angle) - 1.0) * plane + np.sin(angle) * rotation
        point = np.einsum("...ij,...j->...i", transport, x)
        return point, transport

    def chart(self):
        chart = StereographicSphereChart(r=self.r, n=self.dim)
        chart.curvature_sign = self.curvature_sign
        return chart


MODELS = {
    "euclidean": EuclideanSpace,
    "sphere": Sphere,
    "hyperbolic": HyperbolicDisk,
    "bump": BumpSurface,
}

BUILTIN_MODEL_IDS = [
    "euclidean:1",
    "euclidean:2",
    "euclidean:3",
    "sphere:r=1",
    "hyperbolic:r=1",
    "bump:a=0.3,s=1",
]


def load_model(identifier, curvature_sign=1.0):
    model = build_from_catalog(MODELS, identifier, "model")
    if curvature_sign != 1.0:
        logger.warning("Model '%s' loaded with curvature sign %s", model.name, curvature_sign)
    model.curvature_sign = float(curvature_sign)
    return model


def builtin_models(curvature_sign=1.0):
    from potentials import DRIFTS, POTENTIALS

    return {
        "models": {identifier: load_model(identifier, curvature_sign) for identifier in BUILTIN_MODEL_IDS},
        "drifts": sorted(DRIFTS),
        "potentials": sorted(POTENTIALS),
    }


def _raw_theta(model, x, v1, v2, v3):
    nabla = model.nabla_ricci
    return nabla(x, v3, v1, v2) - nabla(x, v1, v3, v2) - nabla(x, v2, v1, v3)


def theta(model, point, v1, v2, v3):
    """(∇_v3 Ric)(v1,v2) - (∇_v1 Ric)(v3,v2) - (∇_v2 Ric)(v1,v3)."""
    x = model.check_point(point)
    v1, v2, v3 = (model.check_tangent(x, v) for v in (v1, v2, v3))
    return _raw_theta(model, x, v1, v2, v3)


def theta_vector(model, point, v2, v1):
    """The vector Θ(v2)(v1), metric dual of w -> theta(v1, v2, w)."""
    x = np.asarray(point, dtype=float)
    basis = np.eye(model.coord_dim)
    covector = np.stack(
        [_raw_theta(model, x, v1, v2, np.broadcast_to(basis[k], np.broadcast(x, v1).shape)) for k in range(model.coord_dim)],
        axis=-1,
    )
    return model.sharp(x, covector)


def theta_h(model, fields, point, v2, v1):
    """½Θ(v2)(v1) + ∇²(∇h)(v2, v1) + R(∇h, v2)v1."""
    x = model.check_point(point)
    v1 = model.check_tangent(x, v1)
    v2 = model.check_tangent(x, v2)
    value = 0.5 * theta_vector(model, x, v2, v1)
    if not fields.drift.is_zero:
        grad = fields.grad_h(x)
        value = value + fields.second_grad_h(x, v2, v1) + model.riemann(x, grad, v2, v1)
    return value


def _coordinate_derivative(func, x, step):
    """∂_k func(x) stacked on a trailing axis, by central differences."""
    parts = []
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = step
        parts.append((func(x + e) - func(x - e)) / (2.0 * step))
    return np.stack(parts, axis=-1)


def _record_check(report, name, fd_value, analytic, points, tolerance):
    deviation = np.abs(fd_value - analytic) / (1.0 + np.abs(analytic))
    per_point = deviation.reshape(deviation.shape[0], -1).max(axis=1)
    worst = int(np.argmax(per_point))
    report["checks"][name] = {
        "max_deviation": float(per_point[worst]),
        "worst_point": points[worst].tolist(),
        "tolerance": tolerance,
        "passed": bool(per_point[worst] <= tolerance),
    }


def _finish_report(report, raise_on_failure, kind):
    report["passed"] = all(check["passed"] for check in report["checks"].values())
    report["max_deviation"] = max(check["max_deviation"] for check in report["checks"].values())
    if report["passed"]:
        logger.info("%s check of '%s' passed (max deviation %.3e)", kind, report["model"], report["max_deviation"])
    else:
        failed = [name for name, check in report["checks"].items() if not check["passed"]]
        worst = max(failed, key=lambda name: report["checks"][name]["max_deviation"])
        message = "{} check of '{}' failed: {} (deviation {:.3e} at point {})".format(
            kind,
            report["model"],
            ", ".join(failed),
            report["checks"][worst]["max_deviation"],
            report["checks"][worst]["worst_point"],
        )
        if raise_on_failure:
            raise VerificationError(message, report=report)
        logger.warning(message)
    return report


def verify_connection(model, tolerance=FD_TOLERANCE, n_points=100, step=FD_STEP, seed=0, raise_on_failure=True):
    """Christoffel symbols against finite differences of the metric, and ∇g = 0."""
    chart = model.chart()
    rng = np.random.default_rng(seed)
    y = chart.sample_points(rng, n_points)
    g = chart.metric(y)
    g_inv = np.linalg.inv(g)
    gamma = chart.christoffel(y)
    # dg[..., a, b, c] = ∂_c g_ab
    dg = _coordinate_derivative(chart.metric, y, step)
    lowered = np.swapaxes(dg, -1, -2) + dg - np.moveaxis(dg, -1, -3)
    gamma_fd = 0.5 * np.einsum("...il,...ljk->...ijk", g_inv, lowered)
    nabla_g = dg - np.einsum("...mki,...mj->...ijk", gamma, g) - np.einsum("...mkj,...im->...ijk", gamma, g)

    report = {"model": model.name, "n_points": n_points, "step": step, "checks": {}}
    _record_check(report, "christoffel", gamma_fd, gamma, y, tolerance)
    _record_check(report, "metric_compatibility", nabla_g, np.zeros_like(nabla_g), y, tolerance)
    return _finish_report(report, raise_on_failure, "Connection")


def _riemann_tensor(model, x):
    """R[..., i, j, k, l] = component i of R(e_k, e_l)e_j."""
    d = model.coord_dim
    basis = np.eye(d)
    shape = np.shape(x)
    tensor = np.zeros(shape[:-1] + (d, d, d, d))
    for j in range(d):
        for k in range(d):
            for l in range(d):
                e = [np.broadcast_to(basis[index], shape) for index in (k, l, j)]
                tensor[..., :, j, k, l] = model.riemann(x, *e)
    return tensor


def _nabla_ricci_fd(chart, y, a, b, c, step):
    """⟨(∇_a Ric♯)(b), c⟩ from central differences of the analytic Ricci map."""
    gamma = chart.christoffel(y)
    ric = chart.ricci_sharp(y)
    ric_b = np.einsum("...ij,...j->...i", ric, b)
    derivative = (
        np.einsum("...ij,...j->...i", chart.ricci_sharp(y + step * a), b)
        - np.einsum("...ij,...j->...i", chart.ricci_sharp(y - step * a), b)
    ) / (2.0 * step)
    covariant = (
        derivative
        + np.einsum("...ijk,...j,...k->...i", gamma, a, ric_b)
        - np.einsum("...ij,...j->...i", ric, np.einsum("...ijk,...j,...k->...i", gamma, a, b))
    )
    return chart.inner(y, covariant, c)


def verify_curvature(model, tolerance=FD_TOLERANCE, n_points=1000, step=FD_STEP, seed=0, raise_on_failure=True):
    """Riemann symmetries, Bianchi, Riemann/Ricci/∇Ric/Θ against finite differences."""
    rng = np.random.default_rng(seed)
    report = {"model": model.name, "n_points": n_points, "step": step, "checks": {}}

    x = model.sample_points(rng, n_points)
    u, v, w, z = (model.random_tangent(rng, x) for _ in range(4))
    ruv_w = model.riemann(x, u, v, w)
    _record_check(report, "antisymmetry_uv", ruv_w, -model.riemann(x, v, u, w), x, 1e-10)
    _record_check(
        report, "antisymmetry_wz", model.inner(x, ruv_w, z), -model.inner(x, model.riemann(x, u, v, z), w), x, 1e-10
    )
    bianchi = ruv_w + model.riemann(x, v, w, u) + model.riemann(x, w, u, v)
    _record_check(report, "first_bianchi", bianchi, np.zeros_like(bianchi), x, 1e-10)

    # Ric(v,w) as the trace of u -> R(u,v)w in an orthonormal frame
    frame = model.initial_frame(x)
    trace = sum(
        model.inner(x, model.riemann(x, frame[..., :, c], v, w), frame[..., :, c]) for c in range(model.dim)
    )
    ricci = model.inner(x, np.einsum("...ij,...j->...i", model.ricci_sharp(x), v), w)
    _record_check(report, "ricci_trace", trace, ricci, x, tolerance)
    ricci_vw = model.inner(x, np.einsum("...ij,...j->...i", model.ricci_sharp(x), v), w)
    ricci_wv = model.inner(x, np.einsum("...ij,...j->...i", model.ricci_sharp(x), w), v)
    _record_check(report, "ricci_symmetry", ricci_vw, ricci_wv, x, 1e-10)

    chart = model.chart()
    y = chart.sample_points(rng, n_points)
    gamma = chart.christoffel(y)
    # dgamma[..., i, j, k, c] = ∂_c Γ^i_jk
    dgamma = _coordinate_derivative(chart.christoffel, y, step)
    riemann_fd = (
        np.einsum("...iljk->...ijkl", dgamma)
        - np.einsum("...ikjl->...ijkl", dgamma)
        + np.einsum("...ikm,...mlj->...ijkl", gamma, gamma)
        - np.einsum("...ilm,...mkj->...ijkl", gamma, gamma)
    )
    _record_check(report, "riemann_fd", riemann_fd, _riemann_tensor(chart, y), y, tolerance)
    ricci_fd = np.einsum("...ijil->...jl", riemann_fd)
    _record_check(report, "ricci_fd", ricci_fd, chart.ricci_form(y), y, tolerance)

    a, b, c = (chart.random_tangent(rng, y) for _ in range(3))
    nabla_fd = _nabla_ricci_fd(chart, y, a, b, c, step)
    _record_check(report, "nabla_ricci_fd", nabla_fd, chart.nabla_ricci(y, a, b, c), y, tolerance)
    theta_fd = (
        _nabla_ricci_fd(chart, y, c, a, b, step)
        - _nabla_ricci_fd(chart, y, a, c, b, step)
        - _nabla_ricci_fd(chart, y, b, a, c, step)
    )
    _record_check(report, "theta_fd", theta_fd, _raw_theta(chart, y, a, b, c), y, tolerance)
    return _finish_report(report, raise_on_failure, "Curvature")


def second_covariant_fd(model, field, x, a, b, step=FD_STEP):
    """∇²Y(a, b) = ∇_a(∇_b Y) - ∇_{∇_a b}Y by nested central differences.

    b is carried parallel along the geodesic in direction a, so the second
    term vanishes. ``field`` maps points to tangent vectors.
    """

    def covariant_derivative(point, direction):
        forward, _ = model.geodesic_transport(point, direction, step)
        backward, _ = model.geodesic_transport(point, direction, -step)
        ambient = (field(forward) - field(backward)) / (2.0 * step)
        if model.representation == "extrinsic":
            return model.project(point, ambient)
        return ambient

    x = np.asarray(x, dtype=float)
    values = []
    for sign in (1.0, -1.0):
        point, transport = model.geodesic_transport(x, a, sign * step)
        carried = np.einsum("...ij,...j->...i", transport, b)
        value = covariant_derivative(point, carried)
        values.append(np.einsum("...ji,...j->...i", transport, value))
    return (values[0] - values[1]) / (2.0 * step)


def check_condition_c1(model, fields, points=None, n_points=200, seed=0):
    """Smallest eigenvalue of Ric - 2 Hess h against the stored bound -K."""
    if points is None:
        points = model.sample_points(np.random.default_rng(seed), n_points)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    frame = model.initial_frame(points)
    form = model.ricci_form(points) - 2.0 * fields.hess_h(points)
    matrix = np.einsum("...ia,...ij,...jb->...ab", frame, form, frame)
    smallest = float(np.min(np.linalg.eigvalsh(0.5 * (matrix + np.swapaxes(matrix, -1, -2)))))
    margin = smallest + model.lower_bound_K
    result = {
        "model": model.name,
        "fields": fields.identifier,
        "min_eigenvalue": smallest,
        "K": model.lower_bound_K,
        "margin": margin,
        "satisfied": bool(margin >= -1e-10),
    }
    if not result["satisfied"]:
        logger.warning("Ric - 2 Hess h >= -K violated on '%s' (margin %.3e)", model.name, margin)
    return result


def rho_bar(model, fields):
    """Upper bound for sup_{|v|=1} (-½Ric + Hess h)(v, v)."""
    _, hess_upper = fields.drift.hess_bounds(model)
    return -0.5 * model.ricci_lower + hess_upper
