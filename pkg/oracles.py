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
"""Closed-form values on flat space, the Ornstein-Uhlenbeck process and round spheres.

Every oracle returns None when no closed form is known for the inputs.
A constant potential c multiplies every value by exp(POTENTIAL_SIGN·c·t).
"""

import numpy as np

from estimators import POTENTIAL_SIGN
from observables import ConstantFunction, LinearFunction, SineFunction, SquareFunction


def gaussian_law(model, fields, t):
    """(a, variance) with x_t ~ N(a·x0, variance·Id), or None."""
    if model.family != "euclidean":
        return None
    drift = fields.drift
    if drift.is_zero:
        return 1.0, float(t)
    if drift.identifier.startswith("quadratic"):
        c = drift.c
        return float(np.exp(-c * t)), float(-np.expm1(-2.0 * c * t) / (2.0 * c))
    return None


def _potential_factor(fields, t):
    potential = fields.potential
    if not potential.is_constant:
        return None
    return float(np.exp(POTENTIAL_SIGN * potential.c * t))


def _coordinate_moments(f, mean, variance):
    """E g(Z), E g'(Z), E g''(Z) for Z ~ N(mean, variance)."""
    if isinstance(f, LinearFunction):
        return mean, 1.0, 0.0
    if isinstance(f, SquareFunction):
        return mean ** 2 + variance, 2.0 * mean, 2.0
    if isinstance(f, SineFunction):
        damping = np.exp(-0.5 * variance)
        return np.sin(mean) * damping, np.cos(mean) * damping, -np.sin(mean) * damping
    return None


def gaussian_oracle(model, fields, f, t, x0, v1=None, v2=None):
    """(value, gradient·v1, Hess(v1, v2)) under a Gaussian law, or None."""
    law = gaussian_law(model, fields, t)
    factor = _potential_factor(fields, t)
    if law is None or factor is None:
        return None
    a, variance = law
    x0 = np.asarray(x0, dtype=float)
    if isinstance(f, ConstantFunction):
        return {"value": factor * f.c, "gradient": 0.0, "hessian": 0.0}
    moments = _coordinate_moments(f, a * x0[f.axis - 1], variance)
    if moments is None:
        return None
    value, d1, d2 = moments
    k = f.axis - 1
    v1k = 0.0 if v1 is None else float(np.asarray(v1)[k])
    v2k = 0.0 if v2 is None else float(np.asarray(v2)[k])
    return {
        "value": factor * value,
        "gradient": factor * a * d1 * v1k,
        "hessian": factor * a * a * d2 * v1k * v2k,
    }


def sphere_rate(model):
    """λ with ½Δ x_k = -λ x_k on S^n(r)."""
    return model.dim / (2.0 * model.r ** 2)


def sphere_oracle(model, fields, f, t, x0, v1=None, v2=None):
    """Linear coordinate functions are eigenfunctions of the Laplacian on S^n(r)."""
    if model.family != "sphere" or not fields.drift.is_zero:
        return None
    factor = _potential_factor(fields, t)
    if factor is None:
        return None
    x0 = np.asarray(x0, dtype=float)
    if isinstance(f, ConstantFunction):
        return {"value": factor * f.c, "gradient": 0.0, "hessian": 0.0}
    if not isinstance(f, LinearFunction):
        return None
    decay = factor * np.exp(-sphere_rate(model) * t)
    k = f.axis - 1
    out = {"value": decay * x0[k]}
    if v1 is not None:
        out["gradient"] = decay * float(np.asarray(v1)[k])
    if v1 is not None and v2 is not None:
        out["hessian"] = -decay * x0[k] / model.r ** 2 * float(np.dot(v1, v2))
    return out


def sphere_doubly_damped(model, fields, t, x0, v1, v2):
    """E[W⁽²⁾_t(v1, v2)] on S^n(r) with h = 0.

    Follows from the elementary Hessian formula applied to every linear
    coordinate function: E[u_t C_t] = -(x0/r²)⟨v1,v2⟩ e^{-λt}(1 - e^{-(n-1)t/r²}).
    """
    if model.family != "sphere" or not fields.drift.is_zero:
        return None
    r2 = model.r ** 2
    rate = sphere_rate(model)
    return -(np.asarray(x0, dtype=float) / r2) * float(np.dot(v1, v2)) * np.exp(-rate * t) * (
        -np.expm1(-(model.dim - 1) * t / r2)
    )


def nt_mean_flat(t, v1, v2):
    """E|N_t| = 4|v1||v2|/(πt) for Brownian motion on R^n."""
    return 4.0 * np.linalg.norm(v1) * np.linalg.norm(v2) / (np.pi * t)


def closed_form(model, fields, f, t, x0, v1=None, v2=None):
    return gaussian_oracle(model, fields, f, t, x0, v1, v2) or sphere_oracle(model, fields, f, t, x0, v1, v2)


def lookup_oracle(estimator, model, fields, f, t, x0, v1=None, v2=None):
    """Reference value for an estimator run, or None."""
    if estimator in ("doubly_damped_expectation", "transport_derivative_fd"):
        if model.family == "euclidean" and (fields.drift.is_zero or fields.drift.identifier.startswith("quadratic")):
            return np.zeros(model.coord_dim)
        return sphere_doubly_damped(model, fields, t, x0, v1, v2)

    if estimator == "hessian_matrix":
        basis = model.initial_frame(np.asarray(x0, dtype=float))
        n = model.dim
        matrix = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                reference = closed_form(model, fields, f, t, x0, basis[:, i], basis[:, j])
                if reference is None or "hessian" not in reference:
                    return None
                matrix[i, j] = reference["hessian"]
        return matrix

    reference = closed_form(model, fields, f, t, x0, v1, v2)
    if reference is None:
        return None
    key = {
        "feynman_kac": "value",
        "gradient_pathwise": "gradient",
        "gradient_bismut": "gradient",
        "hessian_elementary": "hessian",
        "hessian_fk": "hessian",
        "hessian_fd": "hessian",
    }.get(estimator)
    if key is None or key not in reference:
        return None
    return reference[key]
