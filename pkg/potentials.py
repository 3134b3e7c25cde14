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
"""Drift potentials h and zero-order potentials V.

Everything is expressed in the simulation coordinates of the model the
field is paired with: chart coordinates for intrinsic models, ambient
coordinates for extrinsic ones. ``grad_h`` is the Riemannian gradient (a
tangent vector), ``hess_h`` the bilinear form ∇∇h as a matrix acting on
tangent vectors, ``second_grad_h(x, a, b)`` the vector ∇²(∇h)(a, b).
"""

from dataclasses import dataclass

import numpy as np

from catalog import build_from_catalog
from errors import CapabilityError


class ZeroDrift(object):
    identifier = "zero"
    is_zero = True

    def supports(self, model):
        return True

    def hess_bounds(self, model):
        return 0.0, 0.0

    def h(self, x):
        return np.zeros(x.shape[:-1])

    def grad_h(self, x):
        return np.zeros_like(x)

    def hess_h(self, x):
        return np.zeros(x.shape + (x.shape[-1],))

    def second_grad_h(self, x, a, b):
        return np.zeros(np.broadcast(x, a, b).shape)


class QuadraticWell(object):
    """h(x) = -c|x|²/2 on R^n, the Ornstein-Uhlenbeck drift."""

    is_zero = False

    def __init__(self, c=1.0):
        self.c = float(c)
        self.identifier = "quadratic:c={}".format(self.c)

    def supports(self, model):
        return model.family == "euclidean"

    def hess_bounds(self, model):
        return -self.c, -self.c

    def h(self, x):
        return -0.5 * self.c * np.sum(x * x, axis=-1)

    def grad_h(self, x):
        return -self.c * x

    def hess_h(self, x):
        n = x.shape[-1]
        return np.broadcast_to(-self.c * np.eye(n), x.shape + (n,)).copy()

    def second_grad_h(self, x, a, b):
        return np.zeros(np.broadcast(x, a, b).shape)


class AmbientHeight(object):
    """h(x) = c·x_axis restricted to a round sphere in R³."""

    is_zero = False

    def __init__(self, c=1.0, axis=3):
        self.c = float(c)
        self.axis = int(axis)
        if self.axis < 1:
            raise ValueError("axis is 1-based, got {}".format(axis))
        self.identifier = "height:c={},axis={}".format(self.c, self.axis)

    def supports(self, model):
        return model.family == "sphere" and self.axis <= model.coord_dim

    def hess_bounds(self, model):
        bound = abs(self.c) / model.radius
        return -bound, bound

    def _direction(self, x):
        e = np.zeros(x.shape[-1])
        e[self.axis - 1] = self.c
        return e

    def h(self, x):
        return self.c * x[..., self.axis - 1]

    def grad_h(self, x):
        e = self._direction(x)
        r2 = np.sum(x * x, axis=-1, keepdims=True)
        return e - (x @ e)[..., None] * x / r2

    def hess_h(self, x):
        # Hess(c·x_k)|_sphere = -(c·x_k / r²) g
        r2 = np.sum(x * x, axis=-1)
        m = x.shape[-1]
        projector = np.eye(m) - x[..., :, None] * x[..., None, :] / r2[..., None, None]
        return -(self.h(x) / r2)[..., None, None] * projector

    def second_grad_h(self, x, a, b):
        # ∇²(∇h)(a, b) = -(⟨∇h, a⟩ / r²) b for the restriction of a linear function
        r2 = np.sum(x * x, axis=-1)
        grad = self.grad_h(x)
        return -(np.sum(grad * a, axis=-1) / r2)[..., None] * b


class ConstantPotential(object):
    def __init__(self, c=0.0):
        self.c = float(c)
        self.identifier = "zero" if self.c == 0.0 else "constant:c={}".format(self.c)
        self.is_zero = self.c == 0.0
        self.is_constant = True
        self.bound = abs(self.c)
        self.holder_exponent = 1.0
        self.holder_constant = 0.0

    def supports(self, model):
        return True

    def __call__(self, x):
        return np.full(x.shape[:-1], self.c)


class CosinePotential(object):
    """V(x) = eps·cos(x_axis) in simulation coordinates."""

    is_zero = False
    is_constant = False

    def __init__(self, eps=0.2, axis=1):
        self.eps = float(eps)
        self.axis = int(axis)
        self.identifier = "cosine:eps={},axis={}".format(self.eps, self.axis)
        self.bound = abs(self.eps)
        self.holder_exponent = 1.0
        self.holder_constant = abs(self.eps)

    def supports(self, model):
        return 1 <= self.axis <= model.coord_dim

    def __call__(self, x):
        return self.eps * np.cos(x[..., self.axis - 1])


DRIFTS = {
    "zero": ZeroDrift,
    "quadratic": QuadraticWell,
    "height": AmbientHeight,
}

POTENTIALS = {
    "zero": lambda: ConstantPotential(0.0),
    "constant": ConstantPotential,
    "cosine": CosinePotential,
}


@dataclass
class ScalarFieldBundle:
    drift: object
    potential: object

    @property
    def identifier(self):
        return "h={};V={}".format(self.drift.identifier, self.potential.identifier)

    def h(self, x):
        return self.drift.h(x)

    def grad_h(self, x):
        return self.drift.grad_h(x)

    def hess_h(self, x):
        return self.drift.hess_h(x)

    def second_grad_h(self, x, a, b):
        return self.drift.second_grad_h(x, a, b)

    def V(self, x):
        return self.potential(x)

    @property
    def V_bound(self):
        return self.potential.bound

    @property
    def holder(self):
        return self.potential.holder_exponent, self.potential.holder_constant

    def check_supports(self, model):
        for field in (self.drift, self.potential):
            if not field.supports(model):
                raise CapabilityError(
                    "Field '{}' is not defined on model '{}'".format(field.identifier, model.name)
                )


def load_drift(identifier):
    return build_from_catalog(DRIFTS, identifier, "drift potential")


def load_potential(identifier):
    return build_from_catalog(POTENTIALS, identifier, "potential")


def load_fields(h="zero", V="zero", model=None):
    fields = ScalarFieldBundle(drift=load_drift(h), potential=load_potential(V))
    if model is not None:
        fields.check_supports(model)
    return fields
