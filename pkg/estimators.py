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
"""Monte Carlo estimators for P_t f, dP_t f and Hess P_t f.

Every estimator is a map-reduce over batches of paths: each batch is
simulated with its own counter-based stream, reduced to per-statistic
moment accumulators, and the accumulators are merged in a fixed tree order.
"""

from dataclasses import asdict, dataclass, field
from multiprocessing import Pool

import numpy as np
from logzero import logger
from tqdm import tqdm

from errors import CapabilityError, ConfigError, EstimationError
from geometry import rho_bar
from pathsim import BrownianDriver, FinalStateObserver, PathState, PotentialObserver, noise_dim, simulate_path
from transport import TransportObserver


# Sign of the potential in the semigroup, P_t f = E[f(x_t) exp(POTENTIAL_SIGN ∫V)].
POTENTIAL_SIGN = -1.0

SINGULAR_WINDOW = 0.1


@dataclass
class MonteCarloConfig:
    n_paths: int = 10000
    dt: float = 5e-3
    seed: int = 0
    batch_size: int = 5000
    workers: int = 1
    representation: str = "frame"
    control_variate: bool = False
    progress: bool = False
    on_exit: str = "freeze"
    quad_rtol: float = 1e-2

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError("n_paths must be positive, got {}".format(self.n_paths))
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive, got {}".format(self.dt))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive, got {}".format(self.batch_size))
        if self.representation not in ("frame", "gradient"):
            raise ConfigError("representation must be 'frame' or 'gradient', got {!r}".format(self.representation))
        if self.on_exit not in ("freeze", "raise"):
            raise ConfigError("on_exit must be 'freeze' or 'raise', got {!r}".format(self.on_exit))

    def n_steps(self, t, multiple=1):
        if t <= 0.0:
            raise ValueError("t must be positive, got {}".format(t))
        m = int(round(t / self.dt))
        if m < 1 or abs(m * self.dt - t) > 1e-9 * max(1.0, t):
            raise ConfigError("t={} is not an integer multiple of dt={}".format(t, self.dt))
        if m % multiple:
            raise ConfigError("t/dt={} must be divisible by {}".format(m, multiple))
        return m

    def batches(self):
        sizes = [self.batch_size] * (self.n_paths // self.batch_size)
        if self.n_paths % self.batch_size:
            sizes.append(self.n_paths % self.batch_size)
        return sizes


@dataclass
class MomentAccumulator:
    """Count, mean, centered second moment and maximum of a batch of samples."""

    count: int
    mean: np.ndarray
    m2: np.ndarray
    maximum: np.ndarray

    @classmethod
    def from_samples(cls, values):
        values = np.asarray(values, dtype=float)
        if values.shape[0] == 0:
            zeros = np.zeros(values.shape[1:])
            return cls(0, zeros, zeros.copy(), np.full(values.shape[1:], -np.inf))
        mean = values.mean(axis=0)
        return cls(values.shape[0], mean, ((values - mean) ** 2).sum(axis=0), values.max(axis=0))

    def merge(self, other):
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / count)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / count)
        return MomentAccumulator(count, mean, m2, np.maximum(self.maximum, other.maximum))

    @property
    def variance(self):
        if self.count < 2:
            return np.full(np.shape(self.mean), np.nan)
        return self.m2 / (self.count - 1)

    @property
    def stderr(self):
        return np.sqrt(self.variance / max(self.count, 1))


def tree_merge(accumulators):
    items = list(accumulators)
    while len(items) > 1:
        merged = [items[i].merge(items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


@dataclass
class EstimatorResult:
    estimator: str
    mean: object
    stderr: object
    n_paths: int
    n_steps: int
    dt: float
    seed: int
    failed_path_count: int
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return _jsonable(asdict(self))


@dataclass
class PathTask:
    """Everything a worker needs to simulate and reduce one batch."""

    model: object
    fields: object
    f: object
    x0: np.ndarray
    t: float
    dt: float
    n_steps: int
    seed: int
    representation: str
    on_exit: str
    collect: object
    directions: np.ndarray = None
    pairs: np.ndarray = None
    params: dict = field(default_factory=dict)


@dataclass
class BatchSummary:
    batch_index: int
    accumulators: dict
    failed_count: int


def _run_batch(job):
    task, batch_index, size = job
    driver = BrownianDriver(
        task.seed, batch_index, size, noise_dim(task.model, task.representation), task.dt, task.n_steps
    )
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        values, alive, failed_count = task.collect(task, driver)
    accumulators = {
        name: MomentAccumulator.from_samples(np.asarray(value)[alive]) for name, value in values.items()
    }
    return BatchSummary(batch_index, accumulators, failed_count)


def map_reduce(task, mc, desc):
    jobs = [(task, index, size) for index, size in enumerate(mc.batches())]
    logger.debug("%s: %d batch(es), %d worker(s)", desc, len(jobs), mc.workers)
    if mc.workers > 1 and len(jobs) > 1:
        with Pool(processes=mc.workers) as pool:
            summaries = list(tqdm(pool.imap(_run_batch, jobs), total=len(jobs), desc=desc, disable=not mc.progress))
    else:
        summaries = [_run_batch(job) for job in tqdm(jobs, desc=desc, disable=not mc.progress)]

    failed = sum(summary.failed_count for summary in summaries)
    merged = {name: tree_merge([s.accumulators[name] for s in summaries]) for name in summaries[0].accumulators}
    count = next(iter(merged.values())).count
    if count == 0:
        raise EstimationError("{}: all {} paths failed".format(desc, mc.n_paths))
    if failed:
        logger.warning("%s: %d of %d paths failed and were excluded", desc, failed, mc.n_paths)
    return merged, failed, summaries


def _result(name, merged, failed, task, mc, key="value", **extras):
    acc = merged[key]
    extras.setdefault("requested_paths", mc.n_paths)
    extras.setdefault("batch_size", mc.batch_size)
    extras.setdefault("representation", task.representation)
    return EstimatorResult(
        estimator=name,
        mean=acc.mean if np.ndim(acc.mean) else float(acc.mean),
        stderr=acc.stderr if np.ndim(acc.stderr) else float(acc.stderr),
        n_paths=acc.count,
        n_steps=task.n_steps,
        dt=task.dt,
        seed=task.seed,
        failed_path_count=failed,
        extras=extras,
    )


def frame_directions(model, x0, vectors):
    """Frame-0 coordinates a = u_0⁻¹v of tangent vectors at x0."""
    u0 = model.initial_frame(x0)
    g0 = model.metric(x0)
    return np.stack([u0.T @ g0 @ model.check_tangent(x0, v) for v in vectors])


def _prepare(model, fields, f, x0, mc, t, multiple=1, needs=()):
    x0 = model.check_point(x0)
    fields.check_supports(model)
    if f is not None and not f.supports(model):
        raise CapabilityError("Test function '{}' is not defined on '{}'".format(f.identifier, model.name))
    if "gradient" in needs and not f.has_gradient:
        raise CapabilityError("Test function '{}' has no gradient".format(f.identifier))
    if "hessian" in needs and not f.has_hessian:
        raise CapabilityError("Test function '{}' has no Hessian".format(f.identifier))
    if "no_potential" in needs and not fields.potential.is_zero:
        raise CapabilityError("This estimator needs V = 0, got '{}'".format(fields.potential.identifier))
    if mc.representation == "gradient":
        model.tangent_projector(x0)
    return x0, mc.n_steps(t, multiple)


def _task(model, fields, f, x0, t, n_steps, mc, collect, directions=None, pairs=None, representation=None, **params):
    return PathTask(
        model=model,
        fields=fields,
        f=f,
        x0=x0,
        t=float(t),
        dt=mc.dt,
        n_steps=n_steps,
        seed=mc.seed,
        representation=representation or mc.representation,
        on_exit=mc.on_exit,
        collect=collect,
        directions=directions,
        pairs=pairs,
        params=dict(params, control_variate=mc.control_variate),
    )


def _simulate(task, driver, transport=True, second_order=False, state=None, x0=None):
    model, fields = task.model, task.fields
    if transport:
        observers = [
            TransportObserver(
                model,
                fields,
                task.directions,
                task.pairs if second_order else (),
                task.n_steps,
                second_order=second_order,
                potential=not fields.potential.is_zero,
            )
        ]
    else:
        observers = [FinalStateObserver(), PotentialObserver(fields)]
    sim = simulate_path(
        model, fields, task.x0 if x0 is None else x0, driver, observers, task.representation, task.on_exit, state=state
    )
    if transport:
        return sim.outputs[0], sim
    out = dict(sim.outputs[0])
    out["PV_total"] = sim.outputs[1]
    return out, sim


def _observable(task, x):
    values = task.f(x)
    if task.params.get("control_variate"):
        values = values - task.f(task.x0)
    return values


def _transported(out, directions):
    return np.einsum("pdn,pnk,qk->pqd", out["u"], out["A"], directions)


def _collect_feynman_kac(task, driver):
    out, sim = _simulate(task, driver, transport=False)
    weight = np.exp(POTENTIAL_SIGN * out["PV_total"])
    return {"value": task.f(out["x"]) * weight}, sim.alive, sim.failed_count


def feynman_kac(model, fields, f, t, x0, mc):
    """E[f(x_t) exp(-∫₀ᵗ V(x_s)ds)]."""
    x0, m = _prepare(model, fields, f, x0, mc, t)
    task = _task(model, fields, f, x0, t, m, mc, _collect_feynman_kac)
    logger.info("feynman_kac on %s: t=%g, %d paths, %d steps", model.name, t, mc.n_paths, m)
    merged, failed, _ = map_reduce(task, mc, "feynman_kac")
    return _result("feynman_kac", merged, failed, task, mc, potential_sign=POTENTIAL_SIGN)


def _collect_gradient_pathwise(task, driver):
    out, sim = _simulate(task, driver)
    w = _transported(out, task.directions)[:, 0]
    return {"value": task.f.df(task.model, out["x"], w)}, sim.alive, sim.failed_count


def gradient_pathwise(model, fields, f, t, x0, v, mc):
    """E[df(W_t v)]."""
    x0, m = _prepare(model, fields, f, x0, mc, t, needs=("gradient", "no_potential"))
    directions = frame_directions(model, x0, [v])
    task = _task(model, fields, f, x0, t, m, mc, _collect_gradient_pathwise, directions=directions)
    logger.info("gradient_pathwise on %s: t=%g, %d paths, %d steps", model.name, t, mc.n_paths, m)
    merged, failed, _ = map_reduce(task, mc, "gradient_pathwise")
    return _result("gradient_pathwise", merged, failed, task, mc)


def _collect_gradient_bismut(task, driver):
    out, sim = _simulate(task, driver)
    half = task.n_steps // 2
    weight = (2.0 / task.t) * out["G"][half, :, 0]
    return {"value": _observable(task, out["x"]) * weight}, sim.alive, sim.failed_count


def gradient_bismut(model, fields, f, t, x0, v, mc):
    """E[f(x_t) (2/t) ∫₀^{t/2} ⟨X dB, W_s v⟩]."""
    x0, m = _prepare(model, fields, f, x0, mc, t, multiple=2, needs=("no_potential",))
    directions = frame_directions(model, x0, [v])
    task = _task(model, fields, f, x0, t, m, mc, _collect_gradient_bismut, directions=directions)
    logger.info("gradient_bismut on %s: t=%g, %d paths, %d steps", model.name, t, mc.n_paths, m)
    merged, failed, _ = map_reduce(task, mc, "gradient_bismut")
    return _result("gradient_bismut", merged, failed, task, mc, control_variate=mc.control_variate)


def _elementary_terms(task, out):
    """∇df(W v2, W v1) + df(W⁽²⁾(v1, v2)) for every pair, shape (P, q)."""
    model, f = task.model, task.f
    x = out["x"]
    W = _transported(out, task.directions)
    w1 = W[:, task.pairs[:, 0]]
    w2 = W[:, task.pairs[:, 1]]
    dF = f.coordinate_gradient(x)
    hess = model.covariant_hessian(x, dF, f.coordinate_hessian(x))
    second = np.einsum("pdn,pqn->pqd", out["u"], out["C"])
    return np.einsum("pqi,pij,pqj->pq", w2, hess, w1) + np.einsum("pi,pqi->pq", dF, second)


def _collect_hessian_elementary(task, driver):
    out, sim = _simulate(task, driver, second_order=True)
    return {"value": _elementary_terms(task, out)[:, 0]}, sim.alive, sim.failed_count


def hessian_elementary(model, fields, f, t, x0, v1, v2, mc):
    """E[∇df(W_t v2, W_t v1)] + E[df(W⁽²⁾_t(v1, v2))]."""
    x0, m = _prepare(model, fields, f, x0, mc, t, needs=("gradient", "hessian", "no_potential"))
    directions = frame_directions(model, x0, [v1, v2])
    task = _task(
        model, fields, f, x0, t, m, mc, _collect_hessian_elementary, directions=directions, pairs=np.array([[0, 1]])
    )
    logger.info("hessian_elementary on %s: t=%g, %d paths, %d steps", model.name, t, mc.n_paths, m)
    merged, failed, _ = map_reduce(task, mc, "hessian_elementary")
    return _result("hessian_elementary", merged, failed, task, mc)


def singular_weights(n_steps, dt, beta, window=SINGULAR_WINDOW):
    """Quadrature weights for ∫₀^{mΔt} I(s)ds with I(s) ~ s^{β-1} at 0.

    Returns (weights, residual_weights) indexed by grid point j = 0..m; the
    j = 0 entry is unused. On s ≤ window·t the integrand is treated as
    c(s)s^{β-1} with c piecewise linear, the first cell analytically; the
    residual weights give the difference to the plain trapezoid there.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1], got {}".format(beta))
    weights = np.zeros(n_steps + 1)
    residual = np.zeros(n_steps + 1)
    s = dt * np.arange(n_steps + 1)
    last = max(1, int(np.floor(window * n_steps)))

    weights[1] += dt / beta
    for j in range(1, last):
        a, b = s[j], s[j + 1]
        mu0 = (b ** beta - a ** beta) / beta
        mu1 = (b ** (beta + 1.0) - a ** (beta + 1.0)) / (beta + 1.0)
        lam = (mu1 - a * mu0) / dt
        weights[j] += a ** (1.0 - beta) * (mu0 - lam)
        weights[j + 1] += b ** (1.0 - beta) * lam
        residual[j] += a ** (1.0 - beta) * (mu0 - lam) - 0.5 * dt
        residual[j + 1] += b ** (1.0 - beta) * lam - 0.5 * dt
    for j in range(last, n_steps):
        weights[j] += 0.5 * dt
        weights[j + 1] += 0.5 * dt
    return weights, residual


def _half(prefix, index):
    """Prefix values at half the grid times index·Δt/2, linearly interpolated."""
    return 0.5 * (prefix[index // 2] + prefix[(index + 1) // 2])


def _fk_terms(task, out):
    """Per-path terms of the second order Feynman-Kac formula, shape (P, q) each."""
    t, m = task.t, task.n_steps
    h = m // 2
    i, j = task.pairs[:, 0], task.pairs[:, 1]
    G, S = out["G"], out["S"]
    V0 = float(task.fields.V(task.x0))
    prefactor = np.exp(POTENTIAL_SIGN * V0 * t)

    f_cv = _observable(task, out["x"])[:, None]
    N_t = (4.0 / t ** 2) * (G[m][:, i] - G[h][:, i]) * G[h][:, j]
    terms = {
        "first": prefactor * f_cv * N_t,
        "second": prefactor * f_cv * (2.0 / t) * S[h],
    }

    q = len(task.pairs)
    if task.fields.potential.is_constant:
        terms["potential"] = np.zeros((out["x"].shape[0], q))
        terms["quadrature_residual"] = np.zeros((out["x"].shape[0], q))
        return terms

    index = np.arange(1, m + 1)
    s = task.dt * index
    half_G = _half(G, index)
    half_S = _half(S, index)
    N_s = (4.0 / s ** 2)[:, None, None] * (G[index][:, :, i] - half_G[:, :, i]) * half_G[:, :, j]
    bismut_s = (2.0 / s)[:, None, None] * half_S
    PV, V = out["PV"], out["V"]
    tail = (PV[m][None, :] - PV[index]) - V0 * (t - s)[:, None]
    weight = (V[index] - V0) * np.exp(POTENTIAL_SIGN * tail)
    integrand = task.f(out["x"])[None, :, None] * weight[:, :, None] * (N_s + bismut_s)

    beta = task.fields.holder[0] / 2.0
    w, w_residual = singular_weights(m, task.dt, beta)
    terms["potential"] = prefactor * POTENTIAL_SIGN * np.einsum("j,jpq->pq", w[1:], integrand)
    terms["quadrature_residual"] = prefactor * np.einsum("j,jpq->pq", w_residual[1:], integrand)
    return terms


def _collect_hessian_fk(task, driver):
    out, sim = _simulate(task, driver, second_order=True)
    terms = _fk_terms(task, out)
    values = {name: value[:, 0] for name, value in terms.items()}
    values["value"] = values["first"] + values["second"] + values["potential"]
    return values, sim.alive, sim.failed_count


def _quadrature_flag(merged, key, mc, name):
    residual = np.max(np.abs(merged["quadrature_residual"].mean))
    scale = np.max(np.abs(merged[key].mean) + merged[key].stderr)
    unstable = bool(residual > mc.quad_rtol * max(scale, 1e-300))
    if unstable:
        logger.warning("%s: r-quadrature residual %.3e exceeds %.1e of the estimate", name, residual, mc.quad_rtol)
    return unstable, float(residual)


def hessian_fk(model, fields, f, t, x0, v1, v2, mc):
    """Second order Feynman-Kac formula for Hess P_t^{h,V} f(v1, v2)."""
    x0, m = _prepare(model, fields, f, x0, mc, t, multiple=4)
    directions = frame_directions(model, x0, [v1, v2])
    task = _task(model, fields, f, x0, t, m, mc, _collect_hessian_fk, directions=directions, pairs=np.array([[0, 1]]))
    logger.info("hessian_fk on %s (V=%s): t=%g, %d paths, %d steps", model.name, fields.potential.identifier, t, mc.n_paths, m)
    merged, failed, _ = map_reduce(task, mc, "hessian_fk")
    unstable, residual = _quadrature_flag(merged, "value", mc, "hessian_fk")
    return _result(
        "hessian_fk",
        merged,
        failed,
        task,
        mc,
        potential_sign=POTENTIAL_SIGN,
        control_variate=mc.control_variate,
        terms={name: float(merged[name].mean) for name in ("first", "second", "potential")},
        term_stderr={name: float(merged[name].stderr) for name in ("first", "second", "potential")},
        quadrature_residual=residual,
        quadrature_unstable=unstable,
        potential_bound=fields.V_bound,
        holder=list(fields.holder),
    )


def _collect_hessian_matrix(task, driver):
    out, sim = _simulate(task, driver, second_order=True)
    n = task.model.dim
    if task.params["method"] == "fk":
        terms = _fk_terms(task, out)
        raw = terms["first"] + terms["second"] + terms["potential"]
        residual = terms["quadrature_residual"].reshape(-1, n, n)
    else:
        raw = _elementary_terms(task, out)
        residual = np.zeros((raw.shape[0], n, n))
    raw = raw.reshape(-1, n, n)
    transpose = np.swapaxes(raw, -1, -2)
    values = {
        "value": 0.5 * (raw + transpose),
        "raw": raw,
        "asymmetry": raw - transpose,
        "quadrature_residual": residual,
    }
    return values, sim.alive, sim.failed_count


def hessian_matrix(model, fields, f, t, x0, mc, method="elementary"):
    """Full Hessian in the orthonormal basis u_0 from one set of paths, symmetrised."""
    if method not in ("elementary", "fk"):
        raise ConfigError("method must be 'elementary' or 'fk', got {!r}".format(method))
    needs = ("gradient", "hessian", "no_potential") if method == "elementary" else ()
    x0, m = _prepare(model, fields, f, x0, mc, t, multiple=4 if method == "fk" else 1, needs=needs)
    n = model.dim
    pairs = np.array([[i, j] for i in range(n) for j in range(n)])
    task = _task(
        model, fields, f, x0, t, m, mc, _collect_hessian_matrix, directions=np.eye(n), pairs=pairs, method=method
    )
    logger.info("hessian_matrix (%s) on %s: t=%g, %d paths, %d steps", method, model.name, t, mc.n_paths, m)
    merged, failed, _ = map_reduce(task, mc, "hessian_matrix")
    asymmetry = merged["asymmetry"]
    unstable, residual = _quadrature_flag(merged, "value", mc, "hessian_matrix")
    return _result(
        "hessian_matrix",
        merged,
        failed,
        task,
        mc,
        method=method,
        basis=model.initial_frame(x0),
        raw_mean=merged["raw"].mean,
        asymmetry=float(np.max(np.abs(asymmetry.mean))),
        asymmetry_stderr=float(np.max(asymmetry.stderr)),
        quadrature_residual=residual,
        quadrature_unstable=unstable,
    )


def _collect_nt(task, driver):
    out, sim = _simulate(task, driver)
    t, m = task.t, task.n_steps
    h = m // 2
    G = out["G"]
    N_t = (4.0 / t ** 2) * (G[m][:, 0] - G[h][:, 0]) * G[h][:, 1]
    return {"value": np.abs(N_t)}, sim.alive, sim.failed_count


def nt_scaling_diagnostic(model, fields, x0, t_list, mc, v1=None, v2=None):
    """E|N_t| over t_list and the fitted slope of log E|N_t| against log t."""
    x0 = model.check_point(x0)
    if v1 is None or v2 is None:
        frame = model.initial_frame(x0)
        v1 = frame[:, 0] if v1 is None else v1
        v2 = frame[:, -1] if v2 is None else v2
    directions = frame_directions(model, x0, [v1, v2])
    rows = []
    for t in t_list:
        _, m = _prepare(model, fields, None, x0, mc, t, multiple=2)
        task = _task(model, fields, None, x0, t, m, mc, _collect_nt, directions=directions)
        merged, failed, _ = map_reduce(task, mc, "nt_scaling t={:g}".format(t))
        acc = merged["value"]
        rows.append(
            {"t": float(t), "mean": float(acc.mean), "stderr": float(acc.stderr), "n_paths": acc.count, "failed": failed}
        )
    log_t = np.log([row["t"] for row in rows])
    log_mean = np.log([row["mean"] for row in rows])
    slope = float(np.polyfit(log_t, log_mean, 1)[0]) if len(rows) > 1 else float("nan")
    logger.info("E|N_t| log-log slope on %s: %.3f", model.name, slope)
    return {"model": model.name, "rows": rows, "slope": slope}


def exponential_constant(T, K):
    """C₁(T, K) = sup_{0<s≤3KT} (e^s - 1)/s, with C₁(T, 0) = 1."""
    s = 3.0 * K * T
    if s <= 0.0:
        return 1.0
    return float(np.expm1(s) / s)


def alpha_bound(model, T):
    """α₂ = 1/(49 n² ‖R‖∞² C₁(T, K)), infinite on flat models."""
    c1 = exponential_constant(T, model.lower_bound_K)
    if model.sup_norm_R == 0.0:
        return c1, float("inf")
    return c1, 1.0 / (49.0 * model.dim ** 2 * model.sup_norm_R ** 2 * c1)


def split_halves(values):
    """value, half_value and half_weight samples for a doubling check.

    The first half of the paths of a batch (by index) forms the half-size
    estimate, so the check works inside a single batch.
    """
    values = np.asarray(values, dtype=float)
    size = values.shape[0]
    in_half = (np.arange(size) < (size + 1) // 2).astype(float)
    weight = in_half.reshape((size,) + (1,) * (values.ndim - 1))
    return {"value": values, "half_value": values * weight, "half_weight": in_half}


def _collect_exp_moment(task, driver):
    out, sim = _simulate(task, driver, second_order=True)
    norm2 = np.sum(out["C"][:, 0] ** 2, axis=-1)
    alphas = np.asarray(task.params["alphas"])
    values = split_halves(np.exp(alphas[None, :] * norm2[:, None]))
    values["norm2"] = norm2
    return values, sim.alive, sim.failed_count


def exp_moment_rows(alphas, merged, doubling_rtol=0.05):
    """Per-α rows: mean, half-size mean, doubling change and max-term share."""
    full = merged["value"]
    weight = float(merged["half_weight"].mean)
    half_mean = merged["half_value"].mean / weight if weight > 0.0 else np.full(np.shape(full.mean), np.nan)
    rows = []
    for k, alpha in enumerate(alphas):
        mean = full.mean[k]
        total = mean * full.count
        share = float(full.maximum[k] / total) if total > 0 else float("nan")
        change = abs(mean - half_mean[k]) / abs(mean) if mean else 0.0
        doubling_stable = bool(np.isfinite(change) and change <= doubling_rtol)
        finite = bool(np.isfinite(mean))
        rows.append(
            {
                "alpha": float(alpha),
                "mean": float(mean),
                "stderr": float(full.stderr[k]),
                "half_mean": float(half_mean[k]),
                "doubling_change": float(change),
                "max_term_share": share,
                "finite": finite,
                "doubling_stable": doubling_stable,
                "stable": finite and doubling_stable and not share >= 0.5,
            }
        )
    return rows


def exp_moment_diagnostic(model, fields, t, alphas, mc, x0=None, v1=None, v2=None, doubling_rtol=0.05):
    """E exp(α|W⁽²⁾_t|²) for α ≤ α₂ with stability checks.

    Doubling compares the estimate from the first half of every batch's
    paths with the full estimate.
    """
    c1, alpha2 = alpha_bound(model, t)
    alphas = [float(alpha) for alpha in alphas]
    too_large = [alpha for alpha in alphas if alpha > alpha2]
    if too_large:
        raise ConfigError(
            "alpha {} exceeds alpha_2 = {:.4g} = 1/(49 n² ‖R‖² C₁) with C₁ = {:.4g} on '{}'".format(
                too_large, alpha2, c1, model.name
            )
        )
    x0 = model.default_point() if x0 is None else x0
    x0, m = _prepare(model, fields, None, x0, mc, t)
    frame = model.initial_frame(x0)
    v1 = frame[:, 0] if v1 is None else v1
    v2 = frame[:, -1] if v2 is None else v2
    directions = frame_directions(model, x0, [v1, v2])
    task = _task(
        model, fields, None, x0, t, m, mc, _collect_exp_moment, directions=directions, pairs=np.array([[0, 1]]), alphas=alphas
    )
    merged, failed, _ = map_reduce(task, mc, "exp_moment")
    rows = exp_moment_rows(alphas, merged, doubling_rtol)
    for row in rows:
        if not row["stable"]:
            logger.warning("exp_moment on %s: alpha=%g unstable (%s)", model.name, row["alpha"], row)
    return {
        "model": model.name,
        "t": float(t),
        "C1": c1,
        "alpha_2": alpha2,
        "mean_norm2": float(merged["norm2"].mean),
        "n_paths": merged["value"].count,
        "failed": failed,
        "rows": rows,
    }


def _collect_bounds(task, driver):
    model, f = task.model, task.f
    out, sim = _simulate(task, driver, second_order=True)
    x, u = out["x"], out["u"]
    growth = task.params["growth"]
    v1_norm, v2_norm = task.params["norms"]
    W = _transported(out, task.directions)
    gradient = f.df(model, x, W[:, 0])
    grad_norm = model.norm(x, f.gradient_vector(model, x))
    columns = [u[..., a] for a in range(model.dim)]
    hess_frame = np.stack([np.stack([f.nabla_df(model, x, a, b) for b in columns], -1) for a in columns], -2)
    hess_frame = 0.5 * (hess_frame + np.swapaxes(hess_frame, -1, -2))
    values = {
        "A_norm": np.linalg.norm(out["A"], ord=2, axis=(-2, -1)),
        "gradient": gradient,
        "gradient_excess": np.abs(gradient) - grad_norm * growth * v1_norm,
        "grad_norm": grad_norm,
        "hess_norm": np.max(np.abs(np.linalg.eigvalsh(hess_frame)), axis=-1),
        "C_norm": np.sqrt(np.sum(out["C"][:, 0] ** 2, axis=-1)),
        "hessian": _elementary_terms(task, out)[:, 0],
    }
    return values, sim.alive, sim.failed_count


def bound_diagnostic(model, fields, f, t, x0, v1, v2, mc, c=1.0, atol=1e-10):
    """|A_t|, the pathwise gradient and the elementary Hessian against their e^{ρ̄t} bounds.

    ‖df‖∞ and ‖∇df‖∞ are the maxima over the simulated end points, so every
    check is a deterministic consequence of |A_t| ≤ e^{ρ̄t} on the sample.
    """
    x0, m = _prepare(model, fields, f, x0, mc, t, needs=("gradient", "hessian", "no_potential"))
    rho = rho_bar(model, fields)
    growth = float(np.exp(rho * t) * (1.0 + c * mc.dt))
    norms = [float(model.norm(x0, model.check_tangent(x0, v))) for v in (v1, v2)]
    directions = frame_directions(model, x0, [v1, v2])
    task = _task(
        model,
        fields,
        f,
        x0,
        t,
        m,
        mc,
        _collect_bounds,
        directions=directions,
        pairs=np.array([[0, 1]]),
        growth=growth,
        norms=norms,
    )
    merged, failed, _ = map_reduce(task, mc, "bounds")
    df_sup = float(merged["grad_norm"].maximum)
    hess_sup = float(merged["hess_norm"].maximum)
    gradient_bound = df_sup * growth * norms[0]
    hessian_bound = hess_sup * growth ** 2 * norms[0] * norms[1] + df_sup * float(merged["C_norm"].mean) * (1.0 + c * mc.dt)
    checks = {
        "damped_norm": {
            "max": float(merged["A_norm"].maximum),
            "bound": growth,
            "passed": bool(merged["A_norm"].maximum <= growth + atol),
        },
        "gradient_pathwise": {
            "max_excess": float(merged["gradient_excess"].maximum),
            "passed": bool(merged["gradient_excess"].maximum <= atol),
        },
        "gradient_mean": {
            "mean": float(merged["gradient"].mean),
            "bound": gradient_bound,
            "passed": bool(abs(merged["gradient"].mean) <= gradient_bound + atol),
        },
        "hessian_mean": {
            "mean": float(merged["hessian"].mean),
            "bound": hessian_bound,
            "passed": bool(abs(merged["hessian"].mean) <= hessian_bound + atol),
        },
    }
    passed = all(check["passed"] for check in checks.values())
    if not passed:
        failed_checks = [name for name, check in checks.items() if not check["passed"]]
        logger.warning("Bounds violated on %s (%s): %s", model.name, fields.identifier, ", ".join(failed_checks))
    return {
        "model": model.name,
        "fields": fields.identifier,
        "t": float(t),
        "rho_bar": float(rho),
        "growth": growth,
        "checks": checks,
        "passed": passed,
        "n_paths": merged["A_norm"].count,
        "failed": failed,
    }


def _collect_doubly_damped(task, driver):
    out, sim = _simulate(task, driver, second_order=True)
    C = out["C"][:, 0]
    return (
        {"value": np.einsum("pdn,pn->pd", out["u"], C), "frame": C, "norm2": np.sum(C ** 2, axis=-1)},
        sim.alive,
        sim.failed_count,
    )


def doubly_damped_expectation(model, fields, t, x0, v1, v2, mc):
    """E[W⁽²⁾_t(v1, v2)] = E[u_t C_t] together with E[C_t] and E|C_t|²."""
    x0, m = _prepare(model, fields, None, x0, mc, t)
    directions = frame_directions(model, x0, [v1, v2])
    task = _task(
        model, fields, None, x0, t, m, mc, _collect_doubly_damped, directions=directions, pairs=np.array([[0, 1]])
    )
    merged, failed, _ = map_reduce(task, mc, "doubly_damped")
    return _result(
        "doubly_damped_expectation",
        merged,
        failed,
        task,
        mc,
        frame_mean=merged["frame"].mean,
        frame_stderr=merged["frame"].stderr,
        second_moment=float(merged["norm2"].mean),
        second_moment_stderr=float(merged["norm2"].stderr),
    )


def _collect_transport_fd(task, driver):
    model, fields = task.model, task.fields
    eps = task.params["eps"]
    outputs = {}
    alive = np.ones(driver.n_paths, dtype=bool)
    for label, point, frame in task.params["starts"]:
        state = PathState(
            0.0,
            np.broadcast_to(point, (driver.n_paths,) + point.shape).copy(),
            np.broadcast_to(frame, (driver.n_paths,) + frame.shape).copy(),
            np.ones(driver.n_paths, dtype=bool),
        )
        out, sim = _simulate(task, driver.replay(), second_order=(label == "base"), state=state, x0=point)
        outputs[label] = out
        alive &= sim.alive

    a1 = task.directions[:1]
    plus = _transported(outputs["plus"], a1)[:, 0]
    minus = _transported(outputs["minus"], a1)[:, 0]
    base = outputs["base"]
    projector = model.tangent_projector(base["x"])
    fd = np.einsum("pij,pj->pi", projector, plus - minus) / (2.0 * eps)
    second = np.einsum("pdn,pn->pd", base["u"], base["C"][:, 0])
    return {"value": fd, "doubly_damped": second, "difference": second - fd}, alive, int(np.sum(~alive))


def transport_derivative_fd(model, fields, t, x0, v1, v2, mc, eps=1e-3):
    """E[∇_{v2}W_t(v1)] by central differences over start points exp(±εv2).

    The three runs share their driving noise; the doubly damped estimate
    E[u_t C_t] from the same paths is returned alongside.
    """
    x0, m = _prepare(model, fields, None, x0, mc, t)
    v1 = model.check_tangent(x0, v1)
    v2 = model.check_tangent(x0, v2)
    model.tangent_projector(x0)
    u0 = model.initial_frame(x0)
    starts = [("base", x0, u0)]
    for label, sign in (("plus", 1.0), ("minus", -1.0)):
        point, transport = model.geodesic_transport(x0, v2, sign * eps)
        starts.append((label, point, model.orthonormalize(point, transport @ u0)))
    directions = frame_directions(model, x0, [v1, v2])
    task = _task(
        model,
        fields,
        None,
        x0,
        t,
        m,
        mc,
        _collect_transport_fd,
        directions=directions,
        pairs=np.array([[0, 1]]),
        representation="gradient",
        eps=eps,
        starts=starts,
    )
    merged, failed, _ = map_reduce(task, mc, "transport_fd")
    return _result(
        "transport_derivative_fd",
        merged,
        failed,
        task,
        mc,
        eps=eps,
        doubly_damped_mean=merged["doubly_damped"].mean,
        doubly_damped_stderr=merged["doubly_damped"].stderr,
        difference_mean=merged["difference"].mean,
        difference_stderr=merged["difference"].stderr,
    )


def _collect_hessian_fd(task, driver):
    values = []
    alive = np.ones(driver.n_paths, dtype=bool)
    for point, frame in task.params["starts"]:
        state = PathState(
            0.0,
            np.broadcast_to(point, (driver.n_paths,) + point.shape).copy(),
            np.broadcast_to(frame, (driver.n_paths,) + frame.shape).copy(),
            np.ones(driver.n_paths, dtype=bool),
        )
        out, sim = _simulate(task, driver.replay(), transport=False, state=state, x0=point)
        values.append(task.f(out["x"]) * np.exp(POTENTIAL_SIGN * out["PV_total"]))
        alive &= sim.alive
    sum_plus, sum_minus, diff_plus, diff_minus = values
    eps = task.params["eps"]
    value = (sum_plus + sum_minus - diff_plus - diff_minus) / (4.0 * eps ** 2)
    return {"value": value}, alive, int(np.sum(~alive))


def hessian_fd(model, fields, f, t, x0, v1, v2, mc, eps=0.05):
    """Hess P_t f(v1, v2) from P_t f at exp_{x0}(±ε(v1 ± v2)) with common noise."""
    x0, m = _prepare(model, fields, f, x0, mc, t)
    v1 = model.check_tangent(x0, v1)
    v2 = model.check_tangent(x0, v2)
    u0 = model.initial_frame(x0)
    starts = []
    for w in (v1 + v2, -(v1 + v2), v1 - v2, -(v1 - v2)):
        point, transport = model.geodesic_transport(x0, w, eps)
        starts.append((point, model.orthonormalize(point, transport @ u0)))
    task = _task(model, fields, f, x0, t, m, mc, _collect_hessian_fd, eps=eps, starts=starts)
    merged, failed, _ = map_reduce(task, mc, "hessian_fd")
    return _result("hessian_fd", merged, failed, task, mc, eps=eps)


ESTIMATORS = {
    "feynman_kac": feynman_kac,
    "gradient_pathwise": gradient_pathwise,
    "gradient_bismut": gradient_bismut,
    "hessian_elementary": hessian_elementary,
    "hessian_fk": hessian_fk,
    "hessian_matrix": hessian_matrix,
    "hessian_fd": hessian_fd,
    "doubly_damped_expectation": doubly_damped_expectation,
    "transport_derivative_fd": transport_derivative_fd,
    "nt_scaling_diagnostic": nt_scaling_diagnostic,
    "exp_moment_diagnostic": exp_moment_diagnostic,
}
