"""Rollouts, RMSE statistics, drift series, contour grids and the n_c scan."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tape
from .losses import Batch, residual_L1
from .models import NetworkConfig, Params, model_outputs
from .projection import projected_sdot
from .seeding import derive_seed, substream
from .systems import (DATA_ATOL, DATA_RTOL, Dataset, ForceCoefficients, IntegrationError, SystemDef,
                      Trajectory, get_system, integrate, system_rule)
from .training import TrainConfig, split_dataset, train_phase1, train_phase2

log = logging.getLogger(__name__)

ROLLOUT_RTOL = 1e-6
ROLLOUT_ATOL = 1e-8
ROLLOUT_MAX_EVALS = 200_000
JUMP_THRESHOLD = 3.0
ZERO_MEAN = 1e-12


# --------------------------------------------------------------------------
# learned vector field


def learned_field(params: Params, *, activation: str = "silu") -> Callable:
    """``(s, F) -> sdot`` of the trained model, batched over leading rows."""

    def field_fn(s, F=None):
        s = np.asarray(s, dtype=float)
        single = s.ndim == 1
        tape = Tape()
        sdot0, _, J = model_outputs(tape, params, np.atleast_2d(s),
                                    None if F is None else np.atleast_2d(F), activation=activation)
        out = projected_sdot(tape, J, sdot0).value
        return out[0] if single else out

    return field_fn


def learned_constants(params: Params, s, F=None, *, activation: str = "silu") -> np.ndarray:
    """Learned ``c`` at states ``s`` (rows), shape ``(B, n_c)``."""
    tape = Tape()
    _, c, _ = model_outputs(tape, params, np.atleast_2d(np.asarray(s, dtype=float)),
                            None if F is None else np.atleast_2d(F), jacobian=False,
                            activation=activation)
    return c.value


@dataclass
class Rollout:
    trajectory: Trajectory | None
    failed: bool = False
    message: str = ""


def rollout_model(params: Params, system: SystemDef | str, s0, t_end: float, n_points: int,
                  force: ForceCoefficients | None = None, *, activation: str = "silu",
                  rtol: float = ROLLOUT_RTOL, atol: float = ROLLOUT_ATOL,
                  max_evals: int = ROLLOUT_MAX_EVALS) -> Rollout:
    """Integrate the projected learned field from ``s0``; failures are returned, not raised."""
    system = get_system(system) if isinstance(system, str) else system
    field_fn = learned_field(params, activation=activation)
    if system.forced:
        force = force or ForceCoefficients(0.0, 0.0, 0.0)
        rule = lambda t, s: field_fn(s, force(t))  # noqa: E731
    else:
        rule = lambda t, s: field_fn(s)  # noqa: E731
    t_eval = np.linspace(0.0, t_end, n_points)
    try:
        traj = integrate(rule, s0, (0.0, t_end), "rk45", rtol=rtol, atol=atol, t_eval=t_eval,
                         max_evals=max_evals)
    except (IntegrationError, FloatingPointError) as exc:
        return Rollout(None, True, str(exc))
    return Rollout(traj)


# --------------------------------------------------------------------------
# RMSE statistics


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics; ``+inf`` entries are allowed."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("percentile of an empty list")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must be in [0, 100], got {q}")
    pos = q / 100.0 * (x.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, x.size - 1)
    frac = pos - lo
    if frac == 0.0 or x[lo] == x[hi]:
        return float(x[lo])
    return float(x[lo] + frac * (x[hi] - x[lo]))


@dataclass
class SystemReport:
    system: str
    rmse: list[float]
    median: float
    lower: float
    upper: float
    failures: int
    wall_clock: float
    reference: str = "clean"

    @classmethod
    def from_rmse(cls, system: str, rmse, wall_clock: float) -> SystemReport:
        rmse = [float(r) for r in rmse]
        return cls(system, rmse, percentile(rmse, 50.0), percentile(rmse, 2.5), percentile(rmse, 97.5),
                   sum(1 for r in rmse if math.isinf(r)), wall_clock)


@dataclass
class DriftResult:
    values: np.ndarray  # (n_points, k)
    drift: np.ndarray  # (k,)
    absolute: np.ndarray  # (k,) bool, True where drift is absolute


@dataclass
class EvalReport:
    systems: dict[str, SystemReport] = field(default_factory=dict)
    drift: dict[str, list[float]] = field(default_factory=dict)
    drift_absolute: dict[str, bool] = field(default_factory=dict)
    rollout_failures: int = 0
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        """``timing=False`` drops the wall-clock fields so reruns compare bitwise."""
        systems = {k: asdict(v) for k, v in self.systems.items()}
        out = {"systems": systems, "drift": self.drift, "drift_absolute": self.drift_absolute,
               "rollout_failures": self.rollout_failures}
        if timing:
            out["wall_clock"] = self.wall_clock
        else:
            for entry in systems.values():
                entry.pop("wall_clock")
        return out

    def write_json(self, path, timing: bool = True) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict(timing)), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # "inf" / "nan"
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def rollout_rmse(params: Params, system: SystemDef, s0, t_end: float, n_points: int,
                 force=None, activation: str = "silu") -> float:
    """RMSE of one rollout against the clean simulated trajectory; ``inf`` on failure."""
    truth = integrate(system_rule(system, force), s0, (0.0, t_end), "rk45", rtol=DATA_RTOL,
                      atol=DATA_ATOL, t_eval=np.linspace(0.0, t_end, n_points))
    result = rollout_model(params, system, s0, t_end, n_points, force, activation=activation)
    if result.failed:
        log.warning("%s rollout failed: %s", system.name, result.message)
        return math.inf
    return float(np.sqrt(np.mean((result.trajectory.s - truth.s) ** 2)))


def initial_states(system: SystemDef, n_sims: int, seed: int):
    out = []
    for i in range(n_sims):
        rng = substream(seed, "rollout", i)
        s0 = system.ic_sampler(rng)
        force = ForceCoefficients.sample(rng) if system.forced else None
        out.append((s0, force))
    return out


def _rmse_task(args):
    params, system_name, s0, force, t_end, n_points, activation = args
    return rollout_rmse(params, get_system(system_name), s0, t_end, n_points, force, activation)


def rmse_stats(params: Params, system: SystemDef | str, n_sims: int, t_end: float, n_points: int,
               seed: int, *, activation: str = "silu", jobs: int = 1) -> SystemReport:
    """Median and 2.5/97.5 percentiles of per-simulation RMSE."""
    system = get_system(system) if isinstance(system, str) else system
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    start = time.perf_counter()
    tasks = [(params, system.name, s0, force, t_end, n_points, activation)
             for s0, force in initial_states(system, n_sims, seed)]
    rmse = _map(_rmse_task, tasks, jobs)
    if all(math.isinf(r) for r in rmse):
        raise IntegrationError(f"all {n_sims} rollouts failed for {system.name}")
    return SystemReport.from_rmse(system.name, rmse, time.perf_counter() - start)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------
# drift and contour


def constant_drift(rule: Callable, states, *, zero_tol: float = ZERO_MEAN) -> DriftResult:
    """Evaluate ``rule`` along ``states`` and report ``(max - min) / |mean|`` per column.

    Columns with ``|mean| < zero_tol`` get the absolute spread instead and are
    flagged in ``DriftResult.absolute``.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("states must be a nonempty (n_points, n_s) array")
    values = np.asarray(rule(states), dtype=float).reshape(len(states), -1)
    spread = values.max(axis=0) - values.min(axis=0)
    mean = np.abs(values.mean(axis=0))
    absolute = mean < zero_tol
    drift = np.where(absolute, spread, spread / np.where(absolute, 1.0, mean))
    return DriftResult(values, drift, absolute)


def contour_grid(params: Params, dims: tuple[int, int], bounds, resolution: int,
                 fixed=None, *, index: int = 0, activation: str = "silu"):
    """Learned ``c_index`` on a ``resolution x resolution`` grid over two state dims.

    Returns ``(xs, ys, grid)`` with ``grid[i, j] = c(x=xs[j], y=ys[i])``.
    The other state dims take their values from ``fixed`` (default zeros).
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if hasattr(params, "W_hL1"):
        n_s, n_in = np.shape(params.W_hL1)[0], np.shape(params.W_h0)[1]
    else:
        n_s, n_in = params.n_s, np.shape(params.weights[0])[1]
    n_f = n_in - n_s
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    base = np.zeros(n_s) if fixed is None else np.asarray(fixed, dtype=float).copy()
    X, Y = np.meshgrid(xs, ys)
    states = np.tile(base, (X.size, 1))
    states[:, dims[0]] = X.ravel()
    states[:, dims[1]] = Y.ravel()
    F = np.zeros((len(states), n_f)) if n_f else None
    c = learned_constants(params, states, F, activation=activation)
    return xs, ys, c[:, index].reshape(resolution, resolution)


def affine_fit(c, target) -> tuple[float, float]:
    """Least-squares ``(scale, shift)`` with ``scale * c + shift ~= target``."""
    c = np.ravel(c)
    A = np.stack([c, np.ones_like(c)], axis=1)
    (scale, shift), *_ = np.linalg.lstsq(A, np.ravel(target), rcond=None)
    return float(scale), float(shift)


def aligned_correlation(c, target) -> float:
    """Pearson correlation of the affine-aligned ``c`` with ``target``."""
    scale, shift = affine_fit(c, target)
    aligned = scale * np.ravel(c) + shift
    if np.std(aligned) == 0.0 or np.std(target) == 0.0:
        return 0.0
    return float(np.corrcoef(aligned, np.ravel(target))[0, 1])


def write_matrix_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def write_contour_csv(path, xs, ys, grid) -> None:
    """Long format: one row per grid point with columns x, y, c."""
    X, Y = np.meshgrid(xs, ys)
    write_matrix_csv(path, ["x", "y", "c"], np.stack([X.ravel(), Y.ravel(), grid.ravel()], axis=1))


# --------------------------------------------------------------------------
# n_c scan


@dataclass
class ScanResult:
    system: str
    nc_values: list[int]
    seeds: list[int]
    l1: list[list[float]]  # [nc][seed]
    mean: list[float]
    std: list[float]
    relative: list[float]
    detected: int
    threshold: float
    curves: dict[str, list[float]] = field(default_factory=dict)  # "nc/seed" -> val L1 per epoch

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_table_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["n_c", "mean_l1", "std_l1", "relative_l1"])
            for row in zip(self.nc_values, self.mean, self.std, self.relative):
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def detect_num_constants(nc_values, relative, threshold: float = JUMP_THRESHOLD) -> int:
    """Last ``n_c`` before the first relative L1 above ``threshold``."""
    detected = nc_values[0]
    for nc, rel in zip(nc_values, relative):
        if not rel <= threshold:
            break
        detected = nc
    return detected


def _scan_cell(args):
    net_config, train_config, dataset, seed = args
    p1, _ = train_phase1(train_config, net_config, dataset, seed)
    params, hist = train_phase2(train_config, p1, dataset, seed, activation=net_config.activation)
    _, val = split_dataset(dataset, train_config.val_fraction, seed)
    l1 = residual_L1(params, Batch(val.s, val.sdot, val.F if val.n_f else None),
                     activation=net_config.activation)
    return l1, [r.val_l1 for r in hist.records]


def scan_num_constants(system: SystemDef | str, dataset: Dataset, nc_range, n_seeds: int,
                       train_config: TrainConfig, net_config: NetworkConfig, seed: int = 0, *,
                       threshold: float = JUMP_THRESHOLD, jobs: int = 1) -> ScanResult:
    """Train one model per ``(n_c, seed)`` and locate the jump in validation L1.

    ``n_c = 0`` is always trained since it is the normalizing reference.
    """
    system = get_system(system) if isinstance(system, str) else system
    nc_values = sorted(set(int(n) for n in nc_range) | {0})
    if nc_values[-1] > system.n_s - 1 or nc_values[0] < 0:
        raise ValueError(f"n_c range must lie in [0, {system.n_s - 1}] for {system.name}")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = [derive_seed(seed, "scan", j) for j in range(n_seeds)]
    tasks = [(replace(net_config, n_c=nc), train_config, dataset, sd)
             for nc in nc_values for sd in seeds]
    results = _map(_scan_cell, tasks, jobs)
    l1 = [[results[i * n_seeds + j][0] for j in range(n_seeds)] for i in range(len(nc_values))]
    curves = {f"{nc}/{j}": results[i * n_seeds + j][1]
              for i, nc in enumerate(nc_values) for j in range(n_seeds)}
    mean = [float(np.mean(row)) for row in l1]
    std = [float(np.std(row)) for row in l1]
    relative = [m / mean[0] for m in mean]
    relative[0] = 1.0
    detected = detect_num_constants(nc_values, relative, threshold)
    return ScanResult(system.name, nc_values, seeds, l1, mean, std, relative, detected, threshold, curves)
