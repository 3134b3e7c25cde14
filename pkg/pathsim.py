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
"""Batched simulation of h-Brownian motion and its horizontal lift.

A batch of P paths is advanced together. Every stepper returns the new
state and the martingale increment in frame coordinates, ξ_k = u_k⁻¹(X dB_k),
which is all the transport integrators need.
"""

from dataclasses import dataclass

import numpy as np
from logzero import logger

from errors import CapabilityError, ChartExitError, DimensionError, IntegrationError


@dataclass
class PathState:
    t: float
    x: np.ndarray
    u: np.ndarray
    alive: np.ndarray

    @property
    def n_paths(self):
        return self.x.shape[0]

    def copy(self):
        return PathState(self.t, self.x.copy(), self.u.copy(), self.alive.copy())


def initial_state(model, x0, n_paths):
    x0 = model.check_point(x0)
    if x0.ndim != 1:
        raise DimensionError("Initial point must be a single point, got shape {}".format(x0.shape))
    if not bool(model.in_domain(x0)):
        raise DimensionError("Initial point {} is outside the domain {}".format(x0.tolist(), model.domain))
    u0 = model.initial_frame(x0)
    x = np.broadcast_to(x0, (n_paths,) + x0.shape).copy()
    u = np.broadcast_to(u0, (n_paths,) + u0.shape).copy()
    return PathState(0.0, x, u, np.ones(n_paths, dtype=bool))


class BrownianDriver(object):
    """Gaussian increments for one batch of paths.

    The stream of batch b is Philox keyed by SeedSequence([seed, b]); path p
    of a run is lane p mod batch_size of batch p div batch_size. Increments
    are drawn step by step, so replaying a batch reproduces it bit for bit.
    """

    def __init__(self, seed, batch_index, n_paths, dim, dt, n_steps):
        self.seed = int(seed)
        self.batch_index = int(batch_index)
        self.n_paths = int(n_paths)
        self.dim = int(dim)
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.reset()

    def reset(self):
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.batch_index])))
        self.step_index = 0

    def replay(self):
        return BrownianDriver(self.seed, self.batch_index, self.n_paths, self.dim, self.dt, self.n_steps)

    @property
    def t(self):
        return self.dt * self.n_steps

    def increment(self):
        self.step_index += 1
        return np.sqrt(self.dt) * self.rng.standard_normal((self.n_paths, self.dim))

    def __iter__(self):
        for _ in range(self.n_steps):
            yield self.increment()


def _fail(model, state, failed, on_exit):
    indices = np.flatnonzero(failed)
    if on_exit == "raise":
        kind = IntegrationError if model.representation == "extrinsic" else ChartExitError
        raise kind(
            "{} path(s) left the domain of '{}' at t={:.6g}".format(len(indices), model.name, state.t),
            last_state=state,
            failed=indices,
        )
    logger.debug("%d path(s) left the domain of '%s' at t=%.6g", len(indices), model.name, state.t)


def _heun_step(model, fields, state, martingale, dt, on_exit):
    def increments(x, u):
        dx = martingale(x, u) + fields.grad_h(x) * dt
        return dx, model.transport_correction(x, u, dx)

    with np.errstate(all="ignore"):
        dx0, du0 = increments(state.x, state.u)
        dx1, du1 = increments(state.x + dx0, state.u + du0)
        x = state.x + 0.5 * (dx0 + dx1)
        u = state.u + 0.5 * (du0 + du1)
        ok = model.in_domain(x) & np.all(np.isfinite(u), axis=(-2, -1))
        x, u = model.retract(np.where(ok[:, None], x, state.x), np.where(ok[:, None, None], u, state.u))

    failed = state.alive & ~ok
    if np.any(failed):
        _fail(model, state, failed, on_exit)
    keep = ~(state.alive & ok)
    x = np.where(keep[:, None], state.x, x)
    u = np.where(keep[:, None, None], state.u, u)
    return PathState(state.t + dt, x, u, state.alive & ok)


def step_frame_bundle(model, fields, state, dB, dt, on_exit="freeze"):
    """Heun step of dx = u∘dB + ∇h dt, du = -Γ(u, ∘dx), then retraction."""
    dB = np.asarray(dB, dtype=float)
    if dB.shape[-1] != model.dim:
        raise DimensionError("Frame-bundle noise must have {} components, got {}".format(model.dim, dB.shape[-1]))
    new_state = _heun_step(model, fields, state, lambda x, u: np.einsum("...in,...n->...i", u, dB), dt, on_exit)
    return new_state, dB


def step_gradient_sde(model, fields, state, dB_m, dt, on_exit="freeze"):
    """Heun step of dx = X(x)∘dB + ∇h dt with ambient noise, frame carried along."""
    dB_m = np.asarray(dB_m, dtype=float)
    if dB_m.shape[-1] != model.coord_dim:
        raise DimensionError(
            "Gradient SDE noise must have {} components, got {}".format(model.coord_dim, dB_m.shape[-1])
        )
    xi = np.einsum("...in,...i->...n", state.u, dB_m)
    new_state = _heun_step(
        model,
        fields,
        state,
        lambda x, u: np.einsum("...ij,...j->...i", model.tangent_projector(x), dB_m),
        dt,
        on_exit,
    )
    return new_state, xi


STEPPERS = {
    "frame": step_frame_bundle,
    "gradient": step_gradient_sde,
}


def noise_dim(model, representation):
    if representation == "frame":
        return model.dim
    if representation == "gradient":
        return model.coord_dim
    raise CapabilityError("Unknown representation '{}'".format(representation))


class FinalStateObserver(object):
    def start(self, state):
        pass

    def advance(self, before, after, xi, dt):
        pass

    def finish(self, state):
        return {"x": state.x, "u": state.u}


class PotentialObserver(object):
    """Left-point sum of V(x_k)Δt."""

    def __init__(self, fields):
        self.fields = fields

    def start(self, state):
        self.integral = np.zeros(state.n_paths)

    def advance(self, before, after, xi, dt):
        self.integral += self.fields.V(before.x) * dt

    def finish(self, state):
        return self.integral


class TrajectoryObserver(object):
    def __init__(self, every=1):
        self.every = int(every)

    def start(self, state):
        self.step = 0
        self.times = [state.t]
        self.snapshots = [state.x.copy()]

    def advance(self, before, after, xi, dt):
        self.step += 1
        if self.step % self.every == 0:
            self.times.append(after.t)
            self.snapshots.append(after.x.copy())

    def finish(self, state):
        return {"t": np.array(self.times), "x": np.stack(self.snapshots)}


@dataclass
class SimulationResult:
    outputs: list
    state: PathState
    failed_count: int

    @property
    def alive(self):
        return self.state.alive


def simulate_path(model, fields, x0, driver, observers=(), representation="frame", on_exit="freeze", state=None):
    """Run one batch of paths to time driver.t and collect observer outputs."""
    stepper = STEPPERS.get(representation)
    if stepper is None:
        raise CapabilityError("Unknown representation '{}'".format(representation))
    if driver.dim != noise_dim(model, representation):
        raise DimensionError("Driver dimension {} does not match representation '{}'".format(driver.dim, representation))
    if representation == "gradient":
        model.tangent_projector(np.asarray(x0, dtype=float))

    if state is None:
        state = initial_state(model, x0, driver.n_paths)
    for observer in observers:
        observer.start(state)

    for dB in driver:
        new_state, xi = stepper(model, fields, state, dB, driver.dt, on_exit=on_exit)
        for observer in observers:
            observer.advance(state, new_state, xi, driver.dt)
        state = new_state

    failed_count = int(np.sum(~state.alive))
    if failed_count:
        logger.debug("Batch %d: %d of %d paths failed", driver.batch_index, failed_count, driver.n_paths)
    return SimulationResult([observer.finish(state) for observer in observers], state, failed_count)
