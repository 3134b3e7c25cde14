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
"""Test functions f evaluated at the end of the paths."""

import numpy as np

from catalog import build_from_catalog
from errors import CapabilityError


class TestFunction(object):
    """f with coordinate gradient and Hessian.

    Coordinates are the simulation coordinates of the model. df and ∇df are
    formed by the model so the same function serves charts and embeddings.
    Subclasses without derivatives leave ``has_gradient`` / ``has_hessian``
    False.
    """

    __test__ = False

    identifier = None
    axis = None
    smoothness = "Cinf"
    has_gradient = True
    has_hessian = True

    def __repr__(self):
        return "{}({})".format(type(self).__name__, self.identifier)

    def __call__(self, x):
        raise NotImplementedError

    def _gradient(self, x):
        raise NotImplementedError

    def _hessian(self, x):
        raise NotImplementedError

    def supports(self, model):
        return self.axis is None or self.axis <= model.coord_dim

    def coordinate_gradient(self, x):
        if not self.has_gradient:
            raise CapabilityError("Test function '{}' has no gradient".format(self.identifier))
        return self._gradient(np.asarray(x, dtype=float))

    def coordinate_hessian(self, x):
        if not self.has_hessian:
            raise CapabilityError("Test function '{}' has no Hessian".format(self.identifier))
        return self._hessian(np.asarray(x, dtype=float))

    def df(self, model, x, v):
        return np.sum(self.coordinate_gradient(x) * v, axis=-1)

    def nabla_df(self, model, x, a, b):
        matrix = model.covariant_hessian(x, self.coordinate_gradient(x), self.coordinate_hessian(x))
        return np.einsum("...i,...ij,...j->...", a, matrix, b)

    def gradient_vector(self, model, x):
        return model.gradient(x, self.coordinate_gradient(x))


class CoordinateFunction(TestFunction):
    """f(x) = g(x_k) for a scalar g of one coordinate (k is 1-based)."""

    kind = None

    def __init__(self, k=1):
        self.axis = int(k)
        if self.axis < 1:
            raise ValueError("Coordinate index is 1-based, got {}".format(k))
        self.identifier = "{}:{}".format(self.kind, self.axis)

    def scalar(self, s):
        raise NotImplementedError

    def scalar_d1(self, s):
        raise NotImplementedError

    def scalar_d2(self, s):
        raise NotImplementedError

    def __call__(self, x):
        return self.scalar(np.asarray(x, dtype=float)[..., self.axis - 1])

    def _gradient(self, x):
        out = np.zeros(x.shape)
        out[..., self.axis - 1] = self.scalar_d1(x[..., self.axis - 1])
        return out

    def _hessian(self, x):
        i = self.axis - 1
        out = np.zeros(x.shape + (x.shape[-1],))
        out[..., i, i] = self.scalar_d2(x[..., i])
        return out


class LinearFunction(CoordinateFunction):
    kind = "linear"

    def scalar(self, s):
        return s

    def scalar_d1(self, s):
        return np.ones_like(s)

    def scalar_d2(self, s):
        return np.zeros_like(s)


class SquareFunction(CoordinateFunction):
    kind = "square"

    def scalar(self, s):
        return s * s

    def scalar_d1(self, s):
        return 2.0 * s

    def scalar_d2(self, s):
        return np.full_like(s, 2.0)


class SineFunction(CoordinateFunction):
    kind = "sine"

    def scalar(self, s):
        return np.sin(s)

    def scalar_d1(self, s):
        return np.cos(s)

    def scalar_d2(self, s):
        return -np.sin(s)


class ConstantFunction(TestFunction):
    def __init__(self, c=1.0):
        self.c = float(c)
        self.identifier = "constant:{}".format(self.c)

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.c)

    def _gradient(self, x):
        return np.zeros(x.shape)

    def _hessian(self, x):
        return np.zeros(x.shape + (x.shape[-1],))


TEST_FUNCTIONS = {
    "linear": LinearFunction,
    "square": SquareFunction,
    "sine": SineFunction,
    "constant": ConstantFunction,
}


def load_test_function(identifier, model=None):
    f = build_from_catalog(TEST_FUNCTIONS, identifier, "test function")
    if model is not None and not f.supports(model):
        raise CapabilityError("Test function '{}' needs more coordinates than '{}' has".format(identifier, model.name))
    return f
