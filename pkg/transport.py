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
"""Damped and doubly damped parallel transport in frame coordinates.

W_t = u_t A_t u_0⁻¹ and W⁽²⁾_t(v1, v2) = u_t C_t. Directions are stored in
frame-0 coordinates a = u_0⁻¹v. C carries one vector per ordered pair of
directions, so a full Hessian reuses a single set of paths.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from geometry import theta_h


@dataclass
class TransportState:
    A: np.ndarray
    C: np.ndarray
    directions: np.ndarray
    pairs: np.ndarray
    M: np.ndarray = None

    @classmethod
    def start(cls, n_paths, dim, directions, pairs=()):
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        A = np.broadcast_to(np.eye(dim), (n_paths, dim, dim)).copy()
        C = np.zeros((n_paths, len(pairs), dim))
        return cls(A=A, C=C, directions=directions, pairs=pairs)


@dataclass
class WeightAccumulators:
    """Prefix arrays on the time grid, entry k holds the value at τ_k."""

    G: np.ndarray
    S: np.ndarray
    PV: np.ndarray
    V: np.ndarray
    step: int = 0
    extras: dict = field(default_factory=dict)

    @classmethod
    def start(cls, n_steps, n_paths, n_directions, n_pairs):
        return cls(
            G=np.zeros((n_steps + 1, n_paths, n_directions)),
            S=np.zeros((n_steps + 1, n_paths, n_pairs)),
            PV=np.zeros((n_steps + 1, n_paths)),
            V=np.zeros((n_steps + 1, n_paths)),
        )


def frame_coordinates(model, x, u, w):
    """u⁻¹w for tangent vectors w of shape (P, q, d)."""
    return np.einsum("pdn,pde,pqe->pqn", u, model.metric(x), w)


def drift_matrix(model, fields, state):
    """M = u⁻¹(-½Ric♯ + Hess h)u, as a frame-coordinate matrix."""
    form = -0.5 * model.ricci_form(state.x) + fields.hess_h(state.x)
    return np.einsum("pia,pij,pjb->pab", state.u, form, state.u)


def _propagator(M_left, M_right, dt):
    generator = 0.5 * dt * (M_left + M_right)
    if not np.any(generator):
        return None
    return expm(generator)


def damped_step(model, fields, path_before, path_after, transport, dt):
    """A ← expm(½Δt(M_k + M_{k+1})) A."""
    M_left = transport.M if transport.M is not None else drift_matrix(model, fields, path_before)
    M_right = drift_matrix(model, fields, path_after)
    E = _propagator(M_left, M_right, dt)
    A = transport.A if E is None else E @ transport.A
    return TransportState(A=A, C=transport.C, directions=transport.directions, pairs=transport.pairs, M=M_right), E


def transported(path_state, transport, index):
    """W v for the directions selected by index, shape (P, q, d)."""
    a = transport.directions[index]
    return np.einsum("pdn,pnk,qk->pqd", path_state.u, transport.A, a)


def _needs_theta_h(model, fields):
    return model.family not in ("euclidean", "sphere", "hyperbolic", "sphere-chart") or not fields.drift.is_zero


def _theta_h_drift(model, fields, path_state, transport):
    """u⁻¹Θ^h(W v2)(W v1) for every pair.

    Θ^h already carries the ½ on Θ; the h terms enter with weight one.
    """
    n_pairs = len(transport.pairs)
    if n_pairs == 0 or not _needs_theta_h(model, fields):
        return np.zeros_like(transport.C)
    w1 = transported(path_state, transport, transport.pairs[:, 0])
    w2 = transported(path_state, transport, transport.pairs[:, 1])
    x = np.repeat(path_state.x[:, None, :], n_pairs, axis=1)
    vector = theta_h(model, fields, x, w2, w1)
    return frame_coordinates(model, path_state.x, path_state.u, vector)


def curvature_noise(model, path_state, transport, xi):
    """u⁻¹R(uξ, W v2)W v1 at the left point, one vector per pair."""
    n_pairs = len(transport.pairs)
    if n_pairs == 0 or model.family == "euclidean":
        return np.zeros_like(transport.C)
    w1 = transported(path_state, transport, transport.pairs[:, 0])
    w2 = transported(path_state, transport, transport.pairs[:, 1])
    x = np.repeat(path_state.x[:, None, :], n_pairs, axis=1)
    dx = np.repeat(np.einsum("pdn,pn->pd", path_state.u, xi)[:, None, :], n_pairs, axis=1)
    return frame_coordinates(model, path_state.x, path_state.u, model.riemann(x, dx, w2, w1))


def doubly_damped_step(model, fields, path_before, path_after, transport, xi, dt, propagator=None, transport_after=None):
    """C ← E(C + noise) + ½Δt(E g_k + g_{k+1}).

    E is the step propagator of the damped equation, g the Θ^h drift and
    noise the curvature martingale term. ``transport`` is the state at the
    left point; ``transport_after`` carries A at the right point.
    """
    if transport_after is None:
        transport_after, propagator = damped_step(model, fields, path_before, path_after, transport, dt)
    noise = curvature_noise(model, path_before, transport, xi)
    g_left = _theta_h_drift(model, fields, path_before, transport)
    g_right = _theta_h_drift(model, fields, path_after, transport_after)

    def apply(vectors):
        if propagator is None:
            return vectors
        return np.einsum("pab,pqb->pqa", propagator, vectors)

    C = apply(transport.C + noise) + 0.5 * dt * (apply(g_left) + g_right)
    return TransportState(
        A=transport_after.A, C=C, directions=transport.directions, pairs=transport.pairs, M=transport_after.M
    )


def accumulate_weights(path_state, transport, accumulators, xi, dt, fields=None):
    """Left-point Itô increments ⟨ξ, A a_i⟩, ⟨ξ, C⟩ and V(x_k)Δt."""
    k = accumulators.step
    Aa = np.einsum("pnk,qk->pqn", transport.A, transport.directions)
    accumulators.G[k + 1] = accumulators.G[k] + np.einsum("pn,pqn->pq", xi, Aa)
    accumulators.S[k + 1] = accumulators.S[k] + np.einsum("pn,pqn->pq", xi, transport.C)
    if fields is not None:
        accumulators.V[k] = fields.V(path_state.x)
        accumulators.PV[k + 1] = accumulators.PV[k] + accumulators.V[k] * dt
    else:
        accumulators.PV[k + 1] = accumulators.PV[k]
    accumulators.step = k + 1
    return accumulators


class TransportObserver(object):
    """Integrates A, C and the weight prefixes along a batch of paths.

    Weights for step k are accumulated before the transport advances, so
    every stochastic integral uses left-point integrands.
    """

    def __init__(self, model, fields, directions, pairs=(), n_steps=0, second_order=True, potential=True):
        self.model = model
        self.fields = fields
        self.directions = np.atleast_2d(np.asarray(directions, dtype=float))
        self.pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        self.n_steps = int(n_steps)
        self.second_order = second_order and len(self.pairs) > 0
        self.potential = potential

    def start(self, state):
        self.transport = TransportState.start(state.n_paths, self.model.dim, self.directions, self.pairs)
        self.weights = WeightAccumulators.start(self.n_steps, state.n_paths, len(self.directions), len(self.pairs))

    def advance(self, before, after, xi, dt):
        accumulate_weights(before, self.transport, self.weights, xi, dt, self.fields if self.potential else None)
        new_transport, propagator = damped_step(self.model, self.fields, before, after, self.transport, dt)
        if self.second_order:
            new_transport = doubly_damped_step(
                self.model,
                self.fields,
                before,
                after,
                self.transport,
                xi,
                dt,
                propagator=propagator,
                transport_after=new_transport,
            )
        self.transport = new_transport

    def finish(self, state):
        if self.potential:
            self.weights.V[self.weights.step] = self.fields.V(state.x)
        return {
            "x": state.x,
            "u": state.u,
            "A": self.transport.A,
            "C": self.transport.C,
            "G": self.weights.G[: self.weights.step + 1],
            "S": self.weights.S[: self.weights.step + 1],
            "PV": self.weights.PV[: self.weights.step + 1],
            "V": self.weights.V[: self.weights.step + 1],
        }
