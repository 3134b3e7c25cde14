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
import argparse
import csv
import gzip
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields as dataclass_fields, replace

import logzero
import numpy as np
from logzero import logger

import estimators
import oracles
from errors import CatalogError, ConfigError, ManifoldMCError, VerificationError
from estimators import ESTIMATORS, EstimatorResult, MonteCarloConfig
from geometry import builtin_models, load_model, verify_connection, verify_curvature
from observables import load_test_function
from pathsim import BrownianDriver, simulate_path
from potentials import load_fields
from transport import TransportObserver


VERSION = "0.1.0"
OUTPUT_DIR_ENV = "MANIFOLD_MC_OUTPUT_DIR"

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

DEGRADED_FRACTION = 1e-3


def open_file(path, mode):
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


@dataclass
class ExperimentConfig:
    model: str = "euclidean:1"
    h: str = "zero"
    V: str = "zero"
    f: str = "square:1"
    estimator: str = "feynman_kac"
    x0: list = None
    v1: list = None
    v2: list = None
    t: float = 1.0
    t_list: list = None
    dt: float = 5e-3
    n_paths: int = 10000
    seed: int = 0
    batch_size: int = 5000
    workers: int = 0
    representation: str = "frame"
    control_variate: bool = False
    method: str = "elementary"
    alphas: list = None
    eps: float = None
    n_sigma: float = 3.0
    bias_constant: float = 0.0
    curvature_sign: float = 1.0
    output: str = None
    format: str = "json"

    @classmethod
    def from_dict(cls, data):
        known = {item.name for item in dataclass_fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("Unknown config key(s): {}. Known keys: {}".format(", ".join(unknown), ", ".join(sorted(known))))
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        problems = []
        if self.estimator not in ESTIMATORS:
            problems.append("estimator '{}' is not one of {}".format(self.estimator, ", ".join(sorted(ESTIMATORS))))
        if self.n_paths < 100:
            problems.append("n_paths must be at least 100, got {}".format(self.n_paths))
        if self.dt <= 0.0:
            problems.append("dt must be positive, got {}".format(self.dt))
        if self.format not in ("json", "jsonl"):
            problems.append("format must be 'json' or 'jsonl', got {!r}".format(self.format))
        times = self.t_list if self.estimator == "nt_scaling_diagnostic" else [self.t]
        if not times:
            problems.append("t_list is required for nt_scaling_diagnostic")
        for t in times or []:
            steps = t / self.dt if self.dt > 0.0 else float("nan")
            if t <= 0.0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or int(round(steps)) % 4:
                problems.append("t/dt = {:g}/{:g} must be a positive integer divisible by 4".format(t, self.dt))
        if self.estimator == "exp_moment_diagnostic" and not self.alphas:
            problems.append("alphas is required for exp_moment_diagnostic")
        if problems:
            raise ConfigError("Invalid experiment config: " + "; ".join(problems))
        return self


@dataclass
class Experiment:
    config: ExperimentConfig
    model: object
    fields: object
    f: object
    x0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    mc: MonteCarloConfig


@dataclass
class RunRecord:
    config: dict
    result: dict
    oracle: object
    tolerance: object
    passed: object
    degraded: bool
    wall_time: float
    failed_paths: int
    version: str = VERSION

    def to_dict(self):
        return estimators._jsonable(asdict(self))


def load_config(path, overrides=None):
    with open_file(path, "rt") as f:
        data = json.load(f)
    data.update(overrides or {})
    config = ExperimentConfig.from_dict(data)
    logger.info("Loaded config %s (%s on %s)", path, config.estimator, config.model)
    return config


def parse_overrides(tokens):
    """['--n_paths', '20000', '--x0', '[0,0,1]'] -> {'n_paths': 20000, 'x0': [0, 0, 1]}."""
    overrides = {}
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not token.startswith("--"):
            raise ConfigError("Unexpected argument {!r}".format(token))
        key = token[2:]
        if index + 1 < len(tokens) and not tokens[index + 1].startswith("--"):
            text = tokens[index + 1]
            index += 2
        else:
            text = "true"
            index += 1
        try:
            overrides[key] = json.loads(text)
        except json.JSONDecodeError:
            overrides[key] = text
    return overrides


def build(config, progress=True):
    config.validate()
    model = load_model(config.model, curvature_sign=config.curvature_sign)
    fields = load_fields(config.h, config.V, model)
    f = load_test_function(config.f, model)
    x0 = model.default_point() if config.x0 is None else model.check_point(config.x0)
    frame = model.initial_frame(x0)
    v1 = frame[:, 0] if config.v1 is None else model.check_tangent(x0, config.v1)
    v2 = v1 if config.v2 is None else model.check_tangent(x0, config.v2)
    mc = MonteCarloConfig(
        n_paths=config.n_paths,
        dt=config.dt,
        seed=config.seed,
        batch_size=config.batch_size,
        workers=config.workers or os.cpu_count() or 1,
        representation=config.representation,
        control_variate=config.control_variate,
        progress=progress,
    )
    return Experiment(config, model, fields, f, x0, v1, v2, mc)


def execute(experiment):
    e = experiment
    name = e.config.estimator
    function = ESTIMATORS[name]
    if name == "feynman_kac":
        return function(e.model, e.fields, e.f, e.config.t, e.x0, e.mc)
    if name in ("gradient_pathwise", "gradient_bismut"):
        return function(e.model, e.fields, e.f, e.config.t, e.x0, e.v1, e.mc)
    if name in ("hessian_elementary", "hessian_fk"):
        return function(e.model, e.fields, e.f, e.config.t, e.x0, e.v1, e.v2, e.mc)
    if name == "hessian_fd":
        return function(e.model, e.fields, e.f, e.config.t, e.x0, e.v1, e.v2, e.mc, eps=e.config.eps or 0.05)
    if name == "hessian_matrix":
        return function(e.model, e.fields, e.f, e.config.t, e.x0, e.mc, method=e.config.method)
    if name == "doubly_damped_expectation":
        return function(e.model, e.fields, e.config.t, e.x0, e.v1, e.v2, e.mc)
    if name == "transport_derivative_fd":
        return function(e.model, e.fields, e.config.t, e.x0, e.v1, e.v2, e.mc, eps=e.config.eps or 1e-3)
    if name == "nt_scaling_diagnostic":
        return function(e.model, e.fields, e.x0, e.config.t_list, e.mc, e.v1, e.v2)
    if name == "exp_moment_diagnostic":
        return function(e.model, e.fields, e.config.t, e.config.alphas, e.mc, e.x0, e.v1, e.v2)
    raise ConfigError("Unknown estimator '{}'".format(name))


def compare(experiment, result):
    """(oracle, tolerance, passed) for a result; passed is None without an oracle."""
    e = experiment
    if isinstance(result, EstimatorResult):
        oracle = oracles.lookup_oracle(e.config.estimator, e.model, e.fields, e.f, e.config.t, e.x0, e.v1, e.v2)
        if oracle is None:
            return None, None, None
        tolerance = e.config.n_sigma * np.asarray(result.stderr) + e.config.bias_constant * result.dt
        passed = bool(np.all(np.abs(np.asarray(result.mean) - oracle) <= tolerance))
        return oracle, tolerance, passed
    if e.config.estimator == "nt_scaling_diagnostic":
        if not e.fields.drift.is_zero:
            return None, None, None
        return -1.0, 0.2, bool(abs(result["slope"] + 1.0) <= 0.2)
    if e.config.estimator == "exp_moment_diagnostic":
        passed = all(row["stable"] for row in result["rows"])
        if e.model.family == "euclidean":
            return 1.0, 0.0, passed and all(row["mean"] == 1.0 for row in result["rows"])
        return None, None, passed
    return None, None, None


def _failed_paths(result):
    if isinstance(result, EstimatorResult):
        return result.failed_path_count
    if "rows" in result:
        return int(sum(row.get("failed", 0) for row in result["rows"])) + int(result.get("failed", 0))
    return 0


def default_output(config, suffix):
    if config.output:
        return config.output
    directory = os.environ.get(OUTPUT_DIR_ENV)
    if directory:
        os.makedirs(directory, exist_ok=True)
        return os.path.join(directory, "{}{}".format(config.estimator, suffix))
    return None


def write_record(record, path, format="json"):
    with open_file(path, "at" if format == "jsonl" else "wt") as fo:
        if format == "jsonl":
            print(json.dumps(record.to_dict(), ensure_ascii=False), file=fo)
        else:
            json.dump(record.to_dict(), fo, ensure_ascii=False, indent=2)
            print(file=fo)
    logger.info("Wrote record to %s", path)


def run(config, write=True, progress=True):
    experiment = build(config, progress)
    start = time.perf_counter()
    result = execute(experiment)
    wall_time = time.perf_counter() - start
    oracle, tolerance, passed = compare(experiment, result)
    failed = _failed_paths(result)
    degraded = failed > DEGRADED_FRACTION * config.n_paths
    if degraded:
        logger.warning("Run degraded: %d of %d paths failed", failed, config.n_paths)
    record = RunRecord(
        config=config.to_dict(),
        result=result.to_dict() if isinstance(result, EstimatorResult) else estimators._jsonable(result),
        oracle=oracle,
        tolerance=tolerance,
        passed=passed,
        degraded=degraded,
        wall_time=wall_time,
        failed_paths=failed,
    )
    if passed is not None:
        logger.info("%s: oracle %s, pass=%s", config.estimator, np.round(oracle, 6), passed)
    if write:
        path = default_output(config, ".json")
        if path:
            write_record(record, path, config.format)
        else:
            print(json.dumps(record.to_dict(), ensure_ascii=False, indent=2))
    return record


SWEEP_AXES = {"dt": float, "n_paths": int, "t": float}
SWEEP_COLUMNS = ["axis_value", "mean", "stderr", "oracle", "abs_err", "pass"]


def _scalar(value):
    array = np.asarray(value, dtype=float)
    return float(array) if array.ndim == 0 else float(np.max(np.abs(array)))


def fit_slope(xs, ys):
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    keep = (xs > 0) & (ys > 0) & np.isfinite(ys)
    if np.sum(keep) < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


def _sweep_cell(config, axis, value):
    updates = {axis: SWEEP_AXES[axis](value), "output": None}
    if axis == "t" and config.estimator == "nt_scaling_diagnostic":
        updates["t_list"] = [updates["t"]]
    return replace(config, **updates)


def _sweep_row(config, axis, record, value):
    """One CSV row; the diagnostics report E|N_t| or the slope, and the largest α."""
    result = record.result
    row = {"axis_value": value, "stderr": "", "oracle": "", "abs_err": "", "pass": ""}
    if config.estimator == "nt_scaling_diagnostic" and axis == "t":
        single = result["rows"][0]
        row.update(mean=single["mean"], stderr=single["stderr"])
        return row
    if config.estimator == "nt_scaling_diagnostic":
        row["mean"] = result["slope"]
    elif config.estimator == "exp_moment_diagnostic":
        largest = max(result["rows"], key=lambda item: item["alpha"])
        row.update(mean=largest["mean"], stderr=largest["stderr"])
    else:
        row.update(mean=_scalar(result["mean"]), stderr=_scalar(result["stderr"]))
    if record.oracle is not None:
        mean = result.get("mean", row["mean"])
        row["oracle"] = _scalar(record.oracle)
        row["abs_err"] = _scalar(np.asarray(mean) - np.asarray(record.oracle))
    if record.passed is not None:
        row["pass"] = record.passed
    return row


def sweep(config, axis, values, output=None):
    if axis not in SWEEP_AXES:
        raise ConfigError("Sweep axis must be one of {}, got {!r}".format(", ".join(SWEEP_AXES), axis))
    rows = []
    for value in values:
        try:
            record = run(_sweep_cell(config, axis, value), write=False, progress=False)
        except (ManifoldMCError, ValueError) as e:
            logger.error("Sweep cell %s=%s failed: %s", axis, value, e)
            rows.append(dict({column: "" for column in SWEEP_COLUMNS}, axis_value=value))
            continue
        rows.append(_sweep_row(config, axis, record, value))

    done = [row for row in rows if row["mean"] != ""]
    summary = {"axis": axis, "estimator": config.estimator, "values": list(values), "failed_cells": len(rows) - len(done)}
    xs = [float(row["axis_value"]) for row in done]
    if config.estimator == "nt_scaling_diagnostic" and axis == "t":
        summary["fitted_quantity"] = "E|N_t|"
        summary["slope"] = fit_slope(xs, [row["mean"] for row in done])
        summary["slope_pass"] = bool(abs(summary["slope"] + 1.0) <= 0.2)
    elif axis == "dt":
        errs = [row["abs_err"] for row in done if row["abs_err"] != ""]
        if done and len(errs) == len(done):
            summary["fitted_quantity"] = "abs_err"
            summary["slope"] = fit_slope(xs, errs)
            within = all(row["stderr"] != "" and row["abs_err"] <= 3.0 * row["stderr"] for row in done)
            summary["weak_order_pass"] = bool(summary["slope"] >= 0.8 or within)
    elif axis == "n_paths":
        summary["fitted_quantity"] = "stderr"
        pairs = [(x, row["stderr"]) for x, row in zip(xs, done) if row["stderr"] != ""]
        summary["slope"] = fit_slope([x for x, _ in pairs], [y for _, y in pairs])
    else:
        summary["fitted_quantity"] = "abs(mean)"
        summary["slope"] = fit_slope(xs, [abs(row["mean"]) for row in done])

    path = output or default_output(config, "_sweep_{}.csv".format(axis)) or "sweep_{}.csv".format(axis)
    with open_file(path, "wt") as fo:
        writer = csv.DictWriter(fo, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    stem = path[: -len(".gz")] if path.endswith(".gz") else path
    stem = stem[: -len(".csv")] if stem.endswith(".csv") else stem
    with open(stem + ".summary.json", "w") as fo:
        json.dump(estimators._jsonable(summary), fo, ensure_ascii=False, indent=2)
    logger.info("Wrote sweep table to %s (slope %s)", path, summary.get("slope"))
    return rows, summary


@dataclass
class SuiteContext:
    n_paths: int
    dt: float = 5e-3
    seed: int = 0
    workers: int = 1
    curvature_sign: float = 1.0
    n_sigma: float = 3.0

    def mc(self, n_paths=None, **kwargs):
        values = dict(n_paths=n_paths or self.n_paths, dt=self.dt, seed=self.seed, workers=self.workers, batch_size=5000)
        values.update(kwargs)
        return MonteCarloConfig(**values)

    def model(self, identifier):
        return load_model(identifier, curvature_sign=self.curvature_sign)


def _case(name, passed, **details):
    return {"case": name, "passed": bool(passed), **estimators._jsonable(details)}


def _oracle_case(name, result, oracle, n_sigma, allowance=0.0):
    error = np.abs(np.asarray(result.mean) - oracle)
    tolerance = n_sigma * np.asarray(result.stderr) + allowance
    return _case(name, np.all(error <= tolerance), mean=result.mean, stderr=result.stderr, oracle=oracle, tolerance=tolerance)


def _transport_batch(model, fields, x0, t, dt, n_paths, seed, pairs=()):
    n = model.dim
    steps = int(round(t / dt))
    observer = TransportObserver(model, fields, np.eye(n), pairs, steps, second_order=len(pairs) > 0, potential=False)
    driver = BrownianDriver(seed, 0, n_paths, n, dt, steps)
    return simulate_path(model, fields, x0, driver, [observer]).outputs[0]


def _sphere_setup(ctx):
    model = ctx.model("sphere:r=1")
    theta = np.pi / 4
    x0 = np.array([0.0, np.sin(theta), np.cos(theta)])
    v = np.array([0.0, -np.cos(theta), np.sin(theta)])
    return model, x0, v


def check_flat_degeneracy(ctx):
    model = ctx.model("euclidean:2")
    fields = load_fields("zero", "zero", model)
    x0 = np.array([0.3, -0.2])
    out = _transport_batch(model, fields, x0, 0.5, ctx.dt, 1000, ctx.seed, pairs=[[0, 1], [1, 0]])
    identity = np.array_equal(out["A"], np.broadcast_to(np.eye(2), out["A"].shape))
    zero = not np.any(out["C"])
    f = load_test_function("square:1", model)
    e1 = np.array([1.0, 0.0])
    hess = estimators.hessian_elementary(model, fields, f, 0.5, x0, e1, e1, ctx.mc(1000))
    grad = estimators.gradient_pathwise(model, fields, load_test_function("linear:1", model), 0.5, x0, e1, ctx.mc(1000))
    return [
        _case("A_identity_C_zero", identity and zero),
        _case("hessian_x1_squared", hess.mean == 2.0 and hess.stderr == 0.0, mean=hess.mean, stderr=hess.stderr),
        _case("gradient_x1", grad.mean == 1.0 and grad.stderr == 0.0, mean=grad.mean, stderr=grad.stderr),
    ]


def check_gaussian_hessian(ctx):
    model = ctx.model("euclidean:1")
    fields = load_fields("zero", "zero", model)
    f = load_test_function("square:1", model)
    x0, v = np.zeros(1), np.ones(1)
    result = estimators.hessian_fk(model, fields, f, 1.0, x0, v, v, ctx.mc())
    case = _oracle_case("hessian_fk_x_squared", result, 2.0, ctx.n_sigma)
    stderr_bound = 0.05 * np.sqrt(1e5 / ctx.n_paths)
    return [case, _case("hessian_fk_stderr", result.stderr <= stderr_bound, stderr=result.stderr, bound=stderr_bound)]


def check_ou(ctx):
    model = ctx.model("euclidean:1")
    fields = load_fields("quadratic", "zero", model)
    x0, v, t = np.zeros(1), np.ones(1), 1.0
    out = _transport_batch(model, fields, x0, t, ctx.dt, 1000, ctx.seed)
    deviation = float(np.max(np.abs(out["A"] - np.exp(-t))))
    f = load_test_function("sine:1", model)
    result = estimators.gradient_pathwise(model, fields, f, t, x0, v, ctx.mc())
    oracle = oracles.lookup_oracle("gradient_pathwise", model, fields, f, t, x0, v)
    return [
        _case("A_equals_exp_minus_t", deviation <= 1e-8, deviation=deviation),
        _oracle_case("gradient_sine", result, oracle, ctx.n_sigma, 1e-3),
    ]


def check_sphere_eigenfunction(ctx):
    model, x0, v = _sphere_setup(ctx)
    fields = load_fields("zero", "zero", model)
    f = load_test_function("linear:3", model)
    t = 0.5
    allowance = 1.0 * ctx.dt
    mc = ctx.mc()
    mc_cv = ctx.mc(control_variate=True)
    cases = []
    for name, call in (
        ("feynman_kac", lambda: estimators.feynman_kac(model, fields, f, t, x0, mc)),
        ("gradient_pathwise", lambda: estimators.gradient_pathwise(model, fields, f, t, x0, v, mc)),
        ("gradient_bismut", lambda: estimators.gradient_bismut(model, fields, f, t, x0, v, mc_cv)),
        ("hessian_elementary", lambda: estimators.hessian_elementary(model, fields, f, t, x0, v, v, mc)),
        ("hessian_fk", lambda: estimators.hessian_fk(model, fields, f, t, x0, v, v, mc_cv)),
    ):
        result = call()
        oracle = oracles.lookup_oracle(name, model, fields, f, t, x0, v, v)
        cases.append(_oracle_case(name, result, oracle, ctx.n_sigma, allowance))

    out = _transport_batch(model, fields, x0, t, ctx.dt, 1000, ctx.seed)
    deviation = float(np.max(np.abs(out["A"] - np.exp(-t / 2.0) * np.eye(2))))
    cases.append(_case("A_equals_exp_minus_t_half", deviation <= 1e-8, deviation=deviation))

    biases, stderrs = [], []
    dts = [1e-2, 5e-3, 2.5e-3]
    oracle = oracles.lookup_oracle("feynman_kac", model, fields, f, t, x0)
    for dt in dts:
        result = estimators.feynman_kac(model, fields, f, t, x0, ctx.mc(dt=dt))
        biases.append(abs(result.mean - oracle))
        stderrs.append(result.stderr)
    order = fit_slope(dts, biases)
    within = all(bias <= 3.0 * stderr for bias, stderr in zip(biases, stderrs))
    cases.append(_case("dt_sweep_weak_order", order >= 0.8 or within, order=order, biases=biases, stderr=stderrs))
    return cases


def check_doubly_damped(ctx):
    model, x0, v = _sphere_setup(ctx)
    fields = load_fields("zero", "zero", model)
    t = 0.5
    result = estimators.transport_derivative_fd(model, fields, t, x0, v, v, ctx.mc(), eps=1e-3)
    difference = np.abs(result.extras["difference_mean"])
    tolerance = ctx.n_sigma * np.asarray(result.extras["difference_stderr"]) + 5e-3
    oracle = oracles.sphere_doubly_damped(model, fields, t, x0, v, v)
    second = np.asarray(result.extras["doubly_damped_mean"])
    second_tol = ctx.n_sigma * np.asarray(result.extras["doubly_damped_stderr"]) + 5e-3

    normal = np.cross(x0, v)
    orthogonal = estimators.doubly_damped_expectation(model, fields, t, x0, v, normal, ctx.mc())
    frame_mean = np.abs(orthogonal.extras["frame_mean"])
    frame_tol = ctx.n_sigma * np.asarray(orthogonal.extras["frame_stderr"])
    return [
        _case("doubly_damped_vs_finite_difference", np.all(difference <= tolerance), difference=difference, tolerance=tolerance),
        _case("doubly_damped_vs_closed_form", np.all(np.abs(second - oracle) <= second_tol), mean=second, oracle=oracle),
        _case(
            "orthogonal_pair_zero_mean",
            np.all(frame_mean <= frame_tol) and orthogonal.extras["second_moment"] > 0.0,
            frame_mean=frame_mean,
            tolerance=frame_tol,
        ),
    ]


def check_constant_potential(ctx):
    model = ctx.model("euclidean:1")
    f = load_test_function("square:1", model)
    x0, v, t, c = np.array([0.2]), np.ones(1), 1.0, 0.5
    plain = load_fields("zero", "zero", model)
    shifted = load_fields("zero", "constant:c={}".format(c), model)
    mc = ctx.mc(max(100, ctx.n_paths // 10))
    factor = np.exp(estimators.POTENTIAL_SIGN * c * t)
    cases = []
    for name, call in (
        ("feynman_kac", lambda fields: estimators.feynman_kac(model, fields, f, t, x0, mc)),
        ("hessian_fk", lambda fields: estimators.hessian_fk(model, fields, f, t, x0, v, v, mc)),
    ):
        base, scaled = call(plain), call(shifted)
        deviation = abs(scaled.mean - factor * base.mean)
        cases.append(_case(name + "_constant_factor", deviation <= 1e-10 * (1.0 + abs(base.mean)), deviation=deviation))
    return cases


def check_potential_consistency(ctx):
    model = ctx.model("euclidean:2")
    fields = load_fields("zero", "cosine:eps=0.2", model)
    f = load_test_function("square:1", model)
    x0, e1, t = np.array([0.3, 0.1]), np.array([1.0, 0.0]), 0.5
    fk = estimators.hessian_fk(model, fields, f, t, x0, e1, e1, ctx.mc(control_variate=True))
    fd = estimators.hessian_fd(model, fields, f, t, x0, e1, e1, ctx.mc(), eps=0.05)
    combined = np.sqrt(fk.stderr ** 2 + fd.stderr ** 2)
    tolerance = max(3.0 * combined, 0.02 * abs(fd.mean))
    return [
        _case(
            "hessian_fk_vs_finite_difference",
            abs(fk.mean - fd.mean) <= tolerance,
            hessian_fk=fk.mean,
            hessian_fd=fd.mean,
            tolerance=tolerance,
            quadrature_unstable=fk.extras["quadrature_unstable"],
        )
    ]


def check_nt_scaling(ctx):
    t_list = [0.64, 0.32, 0.16, 0.08, 0.04]
    cases = []
    for identifier in ("euclidean:1", "sphere:r=1"):
        model = ctx.model(identifier)
        fields = load_fields("zero", "zero", model)
        x0 = model.default_point()
        report = estimators.nt_scaling_diagnostic(model, fields, x0, t_list, ctx.mc())
        cases.append(_case("slope_" + model.family, abs(report["slope"] + 1.0) <= 0.2, slope=report["slope"]))
        if model.family == "euclidean":
            ok = all(
                abs(row["mean"] - oracles.nt_mean_flat(row["t"], [1.0], [1.0])) <= ctx.n_sigma * row["stderr"]
                for row in report["rows"]
            )
            cases.append(_case("flat_constant", ok, rows=report["rows"]))
    return cases


def check_exp_moment(ctx):
    model = ctx.model("sphere:r=1")
    fields = load_fields("zero", "zero", model)
    c1, alpha2 = estimators.alpha_bound(model, 1.0)
    report = estimators.exp_moment_diagnostic(model, fields, 1.0, [alpha2], ctx.mc(), model.default_point())
    flat = ctx.model("euclidean:2")
    flat_report = estimators.exp_moment_diagnostic(
        flat, load_fields("zero", "zero", flat), 1.0, [1.0], ctx.mc(1000), flat.default_point()
    )
    return [
        _case("C1_closed_form", abs(c1 - np.expm1(3.0) / 3.0) <= 1e-12, C1=c1),
        _case("alpha_2", abs(alpha2 - 1.0 / (49.0 * 4.0 * c1)) <= 1e-15, alpha_2=alpha2),
        _case("sphere_moment_stable", all(row["stable"] for row in report["rows"]), rows=report["rows"]),
        _case("flat_moment_exact", flat_report["rows"][0]["mean"] == 1.0, rows=flat_report["rows"]),
    ]


def check_representation(ctx):
    model, x0, _ = _sphere_setup(ctx)
    fields = load_fields("zero", "zero", model)
    f = load_test_function("linear:3", model)
    frame = estimators.feynman_kac(model, fields, f, 0.5, x0, ctx.mc(representation="frame"))
    gradient = estimators.feynman_kac(model, fields, f, 0.5, x0, ctx.mc(representation="gradient", seed=ctx.seed + 1))
    combined = np.sqrt(frame.stderr ** 2 + gradient.stderr ** 2)
    return [
        _case(
            "frame_vs_gradient_sde",
            abs(frame.mean - gradient.mean) <= ctx.n_sigma * combined,
            frame=frame.mean,
            gradient=gradient.mean,
            combined_stderr=combined,
        )
    ]


def check_bounds(ctx):
    cases = []
    sphere = ctx.model("sphere:r=1")
    angle = np.pi / 3
    x0 = np.array([np.sin(angle), 0.0, np.cos(angle)])
    v = np.array([np.cos(angle), 0.0, -np.sin(angle)])
    bump = ctx.model("bump:a=0.3,s=1")
    e1 = bump.initial_frame(bump.default_point())[:, 0]
    for name, model, h, f, x, direction in (
        ("sphere_height", sphere, "height:c=1,axis=3", "linear:1", x0, v),
        ("bump", bump, "zero", "sine:1", bump.default_point(), e1),
    ):
        fields = load_fields(h, "zero", model)
        f = load_test_function(f, model)
        mc = ctx.mc(max(100, ctx.n_paths // 10))
        report = estimators.bound_diagnostic(model, fields, f, 0.5, x, direction, direction, mc)
        for check, item in report["checks"].items():
            details = {key: value for key, value in item.items() if key != "passed"}
            cases.append(_case("{}_{}".format(name, check), item["passed"], rho_bar=report["rho_bar"], **details))
    return cases


def check_geometry(ctx):
    cases = []
    for identifier, model in builtin_models(ctx.curvature_sign)["models"].items():
        connection = verify_connection(model, raise_on_failure=False)
        curvature = verify_curvature(model, n_points=1000, raise_on_failure=False)
        cases.append(_case("connection_" + identifier, connection["passed"], max_deviation=connection["max_deviation"]))
        cases.append(
            _case(
                "curvature_" + identifier,
                curvature["passed"],
                failed=[name for name, check in curvature["checks"].items() if not check["passed"]],
            )
        )
    return cases


SUITE = [
    ("flat_degeneracy", check_flat_degeneracy),
    ("gaussian_hessian", check_gaussian_hessian),
    ("ou_transport", check_ou),
    ("sphere_eigenfunction", check_sphere_eigenfunction),
    ("doubly_damped", check_doubly_damped),
    ("constant_potential", check_constant_potential),
    ("potential_consistency", check_potential_consistency),
    ("nt_scaling", check_nt_scaling),
    ("exp_moment", check_exp_moment),
    ("representation", check_representation),
    ("geometry", check_geometry),
    ("bounds", check_bounds),
]


def verify_suite(scale=1.0, only=None, mutate=None, seed=0, workers=1):
    if mutate not in (None, "curvature_sign"):
        raise ConfigError("Unknown mutation {!r}".format(mutate))
    ctx = SuiteContext(
        n_paths=max(100, int(1e5 * scale)),
        seed=seed,
        workers=workers,
        curvature_sign=-1.0 if mutate == "curvature_sign" else 1.0,
    )
    selected = [(name, check) for name, check in SUITE if not only or name in only]
    if only and len(selected) != len(set(only)):
        unknown = sorted(set(only) - {name for name, _ in SUITE})
        raise ConfigError("Unknown suite entries: {}".format(", ".join(unknown)))

    report = {"scale": scale, "n_paths": ctx.n_paths, "mutation": mutate, "criteria": {}}
    for name, check in selected:
        start = time.perf_counter()
        try:
            cases = check(ctx)
        except Exception as e:
            logger.exception("%s raised %s: %s", name, type(e).__name__, e)
            cases = [_case("error", False, error="{}: {}".format(type(e).__name__, e))]
        passed = all(case["passed"] for case in cases)
        report["criteria"][name] = {"passed": passed, "seconds": time.perf_counter() - start, "cases": cases}
        logger.info("%-22s %s (%.1fs)", name, "PASS" if passed else "FAIL", report["criteria"][name]["seconds"])
        for case in cases:
            if not case["passed"]:
                logger.warning("  %s failed: %s", case["case"], {k: v for k, v in case.items() if k not in ("case", "passed")})
    report["passed"] = all(item["passed"] for item in report["criteria"].values())
    return report


def _print_matrix(report):
    for name, item in report["criteria"].items():
        cases = " ".join("{}={}".format(case["case"], "ok" if case["passed"] else "FAIL") for case in item["cases"])
        print("{:<22} {:<4}  {}".format(name, "PASS" if item["passed"] else "FAIL", cases))


def list_models():
    catalog = builtin_models()
    for identifier, model in catalog["models"].items():
        print(
            "{:<16} {:<10} n={} coords={} ‖R‖∞={:.4g} K={:.4g} domain: {}".format(
                identifier, model.representation, model.dim, model.coord_dim, model.sup_norm_R, model.lower_bound_K, model.domain
            )
        )
    print("drifts h: " + ", ".join(catalog["drifts"]))
    print("potentials V: " + ", ".join(catalog["potentials"]))


def list_estimators():
    for name, function in ESTIMATORS.items():
        doc = (function.__doc__ or "").strip().splitlines()
        print("{:<28} {}".format(name, doc[0] if doc else ""))


def main(args, extra):
    logzero.loglevel(getattr(logzero, args.log_level.upper()))
    if args.command == "run":
        config = load_config(args.config, parse_overrides(extra))
        record = run(config, progress=not args.no_progress)
        return EXIT_VERIFICATION if record.passed is False else EXIT_OK
    if args.command == "sweep":
        config = load_config(args.config, parse_overrides(extra))
        sweep(config, args.axis, args.values, args.output_file)
        return EXIT_OK
    if extra:
        raise ConfigError("Unexpected arguments: {}".format(" ".join(extra)))
    if args.command == "verify":
        report = verify_suite(scale=args.scale, only=args.only, mutate=args.mutate, seed=args.seed, workers=args.workers)
        _print_matrix(report)
        if args.output_file:
            with open_file(args.output_file, "wt") as fo:
                json.dump(estimators._jsonable(report), fo, ensure_ascii=False, indent=2)
        return EXIT_OK if report["passed"] else EXIT_VERIFICATION
    if args.command == "list-models":
        list_models()
        return EXIT_OK
    if args.command == "list-estimators":
        list_estimators()
        return EXIT_OK
    raise ConfigError("Unknown command {!r}".format(args.command))


def exit_code(error):
    if isinstance(error, VerificationError):
        return EXIT_VERIFICATION
    if isinstance(error, (ConfigError, CatalogError, ValueError, OSError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def make_parser():
    parser = argparse.ArgumentParser(description="Monte Carlo damped transport experiments")
    parser.add_argument("--log_level", type=str, default="info", choices=["debug", "info", "warning", "error"])
    parser.add_argument("--no_progress", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="run one experiment; extra --key value pairs override the config")
    run_parser.add_argument("config", type=str)

    sweep_parser = subparsers.add_parser("sweep", help="run an experiment over values of one axis; extra --key value pairs override the config")
    sweep_parser.add_argument("config", type=str)
    sweep_parser.add_argument("--axis", type=str, required=True, choices=sorted(SWEEP_AXES))
    sweep_parser.add_argument("--values", nargs="+", type=float, required=True)
    sweep_parser.add_argument("--output_file", type=str)

    verify_parser = subparsers.add_parser("verify", help="run the acceptance battery")
    verify_parser.add_argument("--scale", type=float, default=1.0)
    verify_parser.add_argument("--only", nargs="+", type=str)
    verify_parser.add_argument("--mutate", type=str, choices=["curvature_sign"])
    verify_parser.add_argument("--seed", type=int, default=0)
    verify_parser.add_argument("--workers", type=int, default=1)
    verify_parser.add_argument("--output_file", type=str)

    subparsers.add_parser("list-models", help="list built-in models and fields")
    subparsers.add_parser("list-estimators", help="list estimators")
    return parser


if __name__ == "__main__":
    parser = make_parser()
    args, extra = parser.parse_known_args()
    try:
        sys.exit(main(args, extra))
    except Exception as e:
        logger.error("%s: %s", type(e).__name__, e)
        sys.exit(exit_code(e))
