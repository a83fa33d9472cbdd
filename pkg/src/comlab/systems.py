"""Ground-truth dynamical systems, ODE integration and noisy datasets.

All derivative and constant rules are vectorized over leading axes, so
``derivative(s, t, F)`` accepts ``s`` of shape ``(..., n_s)``.
Physical constants are fixed to unit values.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .seeding import substream

log = logging.getLogger(__name__)

MIN_STEP = 1e-12
MIN_SEPARATION = 1e-8
DATA_RTOL = DATA_ATOL = 1e-9


class IntegrationError(RuntimeError):
    pass


class SingularStateError(ValueError):
    pass


@dataclass(frozen=True)
class SystemDef:
    name: str
    n_s: int
    n_c_true: int
    params: dict
    derivative: Callable  # (s, t, F) -> sdot
    constants: Callable  # s -> (..., n_c_true)
    ic_sampler: Callable  # rng -> s0
    constant_names: tuple[str, ...]
    forced: bool = False
    conserved_checked: bool = True

    @property
    def n_f(self) -> int:
        return 1 if self.forced else 0


def _split(s, k):
    return [s[..., i] for i in range(k)]


# mass-spring --------------------------------------------------------------


def _mass_spring(s, t=0.0, F=None):
    x, v = _split(s, 2)
    return np.stack([v, -x], axis=-1)


def _mass_spring_constants(s):
    x, v = _split(s, 2)
    return np.stack([0.5 * (x * x + v * v)], axis=-1)


def _mass_spring_ic(rng):
    return rng.uniform(-1.0, 1.0, size=2)


# 2d pendulum (Cartesian, unit length, g = 1) --------------------------------

G_PEND = 1.0
DAMPING = 0.1


def _pendulum_accel(x, y, vx, vy, fx, gamma):
    # constraint multiplier keeps q.a = -|v|^2 so |q| and q.v stay fixed
    r2 = x * x + y * y
    ax_free = fx - gamma * vx
    ay_free = -G_PEND - gamma * vy
    lam = (-(vx * vx + vy * vy) - (x * ax_free + y * ay_free)) / r2
    return ax_free + lam * x, ay_free + lam * y


def _pendulum(s, t=0.0, F=None):
    x, y, vx, vy = _split(s, 4)
    fx = 0.0 if F is None else np.asarray(F)[..., 0]
    ax, ay = _pendulum_accel(x, y, vx, vy, fx, 0.0)
    return np.stack([vx, vy, ax, ay], axis=-1)


def _damped_pendulum(s, t=0.0, F=None):
    x, y, vx, vy = _split(s, 4)
    ax, ay = _pendulum_accel(x, y, vx, vy, 0.0, DAMPING)
    return np.stack([vx, vy, ax, ay], axis=-1)


def _pendulum_constants(s):
    x, y, vx, vy = _split(s, 4)
    energy = 0.5 * (vx * vx + vy * vy) + G_PEND * y
    length = np.sqrt(x * x + y * y)
    radial = x * vx + y * vy  # zero iff the velocity is perpendicular to the rod
    return np.stack([energy, length, radial], axis=-1)


def _damped_constants(s):
    return _pendulum_constants(s)[..., 1:]


def _pendulum_ic(rng):
    theta = rng.uniform(-math.pi, math.pi)
    omega = rng.uniform(-0.5, 0.5)
    x, y = math.sin(theta), -math.cos(theta)
    return np.array([x, y, omega * -y, omega * x])


# two body (G = m1 = m2 = 1) -------------------------------------------------

TOTAL_MASS = 2.0
REDUCED_MASS = 0.5


def _two_body(s, t=0.0, F=None):
    q1, q2, v1, v2 = s[..., 0:2], s[..., 2:4], s[..., 4:6], s[..., 6:8]
    d = q2 - q1
    r = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    if np.any(r < MIN_SEPARATION):
        raise SingularStateError(f"two-body separation below {MIN_SEPARATION}")
    a1 = d / r**3
    return np.concatenate([v1, v2, a1, -a1], axis=-1)


def _two_body_constants(s):
    x1, y1, x2, y2, vx1, vy1, vx2, vy2 = _split(s, 8)
    px, py = vx1 + vx2, vy1 + vy2
    rx, ry = x1 - x2, y1 - y2
    ux, uy = vx1 - vx2, vy1 - vy2
    r = np.sqrt(rx * rx + ry * ry)
    energy = 0.5 * (vx1**2 + vy1**2 + vx2**2 + vy2**2) - 1.0 / r
    ang = x1 * vy1 - y1 * vx1 + x2 * vy2 - y2 * vx2
    # relative-motion Laplace-Runge-Lenz vector, k = G m1 m2 = 1
    mu = REDUCED_MASS
    lrel = mu * (rx * uy - ry * ux)
    lrl_x = mu * uy * lrel - mu * rx / r
    lrl_y = -mu * ux * lrel - mu * ry / r
    xc, yc = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    ang_cm = xc * py - yc * px
    return np.stack([energy, px, py, ang, lrl_x, lrl_y, ang_cm], axis=-1)


def _two_body_ic(rng):
    ecc = rng.uniform(0.0, 0.4)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    r_p = 1.0
    speed = math.sqrt(TOTAL_MASS * (1.0 + ecc) / r_p)
    rel_q = r_p * np.array([math.cos(phi), math.sin(phi)])
    rel_v = speed * np.array([-math.sin(phi), math.cos(phi)])
    v_cm = rng.uniform(-0.1, 0.1, size=2)
    q1, q2 = 0.5 * rel_q, -0.5 * rel_q
    v1, v2 = v_cm + 0.5 * rel_v, v_cm - 0.5 * rel_v
    return np.concatenate([q1, q2, v1, v2])


# nonlinear spring 2d: central force -|q|^2 q --------------------------------


def _nonlinear_spring(s, t=0.0, F=None):
    qx, qy, vx, vy = _split(s, 4)
    r2 = qx * qx + qy * qy
    return np.stack([vx, vy, -r2 * qx, -r2 * qy], axis=-1)


def _nonlinear_spring_constants(s):
    qx, qy, vx, vy = _split(s, 4)
    r2 = qx * qx + qy * qy
    energy = 0.5 * (vx * vx + vy * vy) + 0.25 * r2 * r2
    ang = qx * vy - qy * vx
    return np.stack([energy, ang], axis=-1)


def _nonlinear_spring_ic(rng):
    return rng.uniform(-1.0, 1.0, size=4)


# Lotka-Volterra (alpha = beta = gamma = delta = 1) ---------------------------


def _lotka_volterra(s, t=0.0, F=None):
    u, w = _split(s, 2)
    return np.stack([u - u * w, u * w - w], axis=-1)


def _lotka_volterra_constants(s):
    u, w = _split(s, 2)
    return np.stack([u + w - np.log(u) - np.log(w)], axis=-1)


def _lotka_volterra_ic(rng):
    return rng.uniform(0.5, 2.0, size=2)


SYSTEMS: dict[str, SystemDef] = {
    sd.name: sd
    for sd in [
        SystemDef("mass-spring", 2, 1, {"k": 1.0, "m": 1.0}, _mass_spring,
                  _mass_spring_constants, _mass_spring_ic, ("energy",)),
        SystemDef("2d-pendulum", 4, 3, {"g": G_PEND, "length": 1.0}, _pendulum,
                  _pendulum_constants, _pendulum_ic, ("energy", "length", "velocity_angle")),
        SystemDef("damped-pendulum", 4, 2, {"g": G_PEND, "length": 1.0, "gamma": DAMPING},
                  _damped_pendulum, _damped_constants, _pendulum_ic, ("length", "velocity_angle"),
                  conserved_checked=False),
        SystemDef("two-body", 8, 7, {"G": 1.0, "m1": 1.0, "m2": 1.0}, _two_body, _two_body_constants,
                  _two_body_ic,
                  ("energy", "x_momentum", "y_momentum", "angular_momentum", "lrl_x", "lrl_y",
                   "cm_angular_momentum")),
        SystemDef("nonlinear-spring-2d", 4, 2, {"k": 1.0}, _nonlinear_spring,
                  _nonlinear_spring_constants, _nonlinear_spring_ic, ("energy", "angular_momentum")),
        SystemDef("lotka-volterra", 2, 1, {"alpha": 1.0, "beta": 1.0, "gamma": 1.0, "delta": 1.0},
                  _lotka_volterra, _lotka_volterra_constants, _lotka_volterra_ic, ("first_integral",)),
        SystemDef("forced-2d-pendulum", 4, 3, {"g": G_PEND, "length": 1.0}, _pendulum,
                  _pendulum_constants, _pendulum_ic, ("energy", "length", "velocity_angle"),
                  forced=True, conserved_checked=False),
    ]
}


def get_system(name: str) -> SystemDef:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; valid names: {', '.join(SYSTEMS)}") from None


def derivative(system: SystemDef, s, t=0.0, F=None) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != system.n_s:
        raise ValueError(f"{system.name}: state has dimension {s.shape[-1]}, expected {system.n_s}")
    return system.derivative(s, t, F)


def true_constants(system: SystemDef, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != system.n_s:
        raise ValueError(f"{system.name}: state has dimension {s.shape[-1]}, expected {system.n_s}")
    return system.constants(s)


# external force -----------------------------------------------------------


@dataclass(frozen=True)
class ForceCoefficients:
    a0: float
    a1: float
    a2: float

    @classmethod
    def sample(cls, rng) -> ForceCoefficients:
        return cls(rng.uniform(-0.5, 0.5), rng.uniform(0.0, 5.0), rng.uniform(0.0, 2.0 * math.pi))

    def __call__(self, t):
        return external_force(t, self.a0, self.a1, self.a2)


def external_force(t, a0: float, a1: float, a2: float) -> np.ndarray:
    """``F_x(t) = a0 cos(a1 t + a2)`` as a length-1 vector (or ``(..., 1)``)."""
    return np.expand_dims(a0 * np.cos(a1 * np.asarray(t, dtype=float) + a2), -1)


# integration --------------------------------------------------------------


@dataclass
class Trajectory:
    t: np.ndarray  # (n,)
    s: np.ndarray  # (n, n_s)


class _BudgetExceeded(Exception):
    pass


def _rk4(rule, s0, t_eval, dt):
    out = np.empty((len(t_eval),) + s0.shape)
    out[0] = s = s0
    for i in range(1, len(t_eval)):
        t0, t1 = t_eval[i - 1], t_eval[i]
        n = max(1, math.ceil((t1 - t0) / dt - 1e-9))
        h = (t1 - t0) / n
        t = t0
        for _ in range(n):
            k1 = rule(t, s)
            k2 = rule(t + 0.5 * h, s + 0.5 * h * k1)
            k3 = rule(t + 0.5 * h, s + 0.5 * h * k2)
            k4 = rule(t + h, s + h * k3)
            s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        out[i] = s
    return out


def integrate(rule: Callable, s0, t_span, method: str = "rk45", *, rtol: float = DATA_RTOL,
              atol: float = DATA_ATOL, dt: float = 1e-3, t_eval=None,
              max_evals: int | None = None) -> Trajectory:
    """Integrate ``ds/dt = rule(t, s)``.

    ``method`` is ``"rk4"`` (fixed step ``dt``) or ``"rk45"`` (adaptive
    Dormand-Prince with ``rtol``/``atol``). States are returned at ``t_eval``
    (default: the two endpoints). ``s0`` may carry leading batch axes for rk4.
    """
    s0 = np.asarray(s0, dtype=float)
    if not np.all(np.isfinite(s0)):
        raise ValueError("initial state is not finite")
    t0, t1 = map(float, t_span)
    t_eval = np.array([t0, t1]) if t_eval is None else np.asarray(t_eval, dtype=float)

    if method == "rk4":
        return Trajectory(t_eval, _rk4(rule, s0, t_eval, dt))
    if method != "rk45":
        raise ValueError(f"unknown method {method!r}; expected 'rk4' or 'rk45'")

    shape = s0.shape
    n_evals = 0

    def fun(t, y):
        nonlocal n_evals
        n_evals += 1
        if max_evals is not None and n_evals > max_evals:
            raise _BudgetExceeded
        return np.asarray(rule(t, y.reshape(shape)), dtype=float).reshape(-1)

    try:
        sol = solve_ivp(fun, (t0, t1), s0.reshape(-1), method="RK45", t_eval=t_eval,
                        rtol=rtol, atol=atol, first_step=None)
    except _BudgetExceeded:
        raise IntegrationError(f"stiff or singular trajectory: more than {max_evals} evaluations") from None
    except SingularStateError as exc:
        raise IntegrationError(f"stiff or singular trajectory: {exc}") from None
    if sol.status != 0 or not np.all(np.isfinite(sol.y)):
        raise IntegrationError(f"stiff or singular trajectory: {sol.message}")
    return Trajectory(sol.t, sol.y.T.reshape((len(sol.t),) + shape))


def system_rule(system: SystemDef, force: ForceCoefficients | None = None) -> Callable:
    if system.forced:
        force = force or ForceCoefficients(0.0, 0.0, 0.0)
        return lambda t, s: system.derivative(s, t, force(t))
    return lambda t, s: system.derivative(s, t, None)


# datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    system: str
    sigma: float
    seed: int
    t: np.ndarray  # (N,)
    s: np.ndarray  # (N, n_s)
    sdot: np.ndarray  # (N, n_s)
    F: np.ndarray  # (N, n_f)
    n_traj: int
    n_points: int
    s_clean: np.ndarray | None = field(default=None, repr=False)
    sdot_clean: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.t)

    @property
    def n_s(self) -> int:
        return self.s.shape[1]

    @property
    def n_f(self) -> int:
        return self.F.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.system, self.sigma, self.seed, self.t[idx], self.s[idx], self.sdot[idx],
                       self.F[idx], self.n_traj, self.n_points)


def generate_dataset(system: SystemDef | str, n_traj: int, t_end: float, n_points: int,
                     sigma: float, seed: int) -> Dataset:
    """Simulate ``n_traj`` trajectories on ``[0, t_end]`` and add N(0, sigma^2) noise.

    Noise is added independently to the states and to the derivatives.
    Trajectory ``i`` draws its initial state from its own substream, so the
    result only depends on ``seed``.
    """
    if isinstance(system, str):
        system = get_system(system)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if n_traj < 1 or n_points < 1:
        raise ValueError("n_traj and n_points must be >= 1")
    t_eval = np.linspace(0.0, t_end, n_points)
    ts, ss, ds, fs = [], [], [], []
    failures = 0
    attempt = 0
    while len(ss) < n_traj:
        rng = substream(seed, "trajectory", attempt)
        attempt += 1
        s0 = system.ic_sampler(rng)
        force = ForceCoefficients.sample(rng) if system.forced else None
        try:
            traj = integrate(system_rule(system, force), s0, (0.0, t_end), "rk45", t_eval=t_eval)
        except IntegrationError as exc:
            failures += 1
            log.warning("%s: trajectory %d failed (%s); resampling", system.name, attempt - 1, exc)
            if failures > 0.2 * n_traj:
                raise IntegrationError(f"{system.name}: {failures} of {attempt} trajectories failed") from None
            continue
        F = force(traj.t) if force else np.zeros((n_points, 0))
        ts.append(traj.t)
        ss.append(traj.s)
        fs.append(F)
        ds.append(system.derivative(traj.s, traj.t, F if system.forced else None))
    if failures:
        log.info("%s: resampled %d failed trajectories", system.name, failures)

    s_clean = np.concatenate(ss)
    sdot_clean = np.concatenate(ds)
    noise = substream(seed, "noise")
    s_noisy = s_clean + sigma * noise.standard_normal(s_clean.shape)
    sdot_noisy = sdot_clean + sigma * noise.standard_normal(sdot_clean.shape)
    return Dataset(system.name, float(sigma), int(seed), np.concatenate(ts), s_noisy, sdot_noisy,
                   np.concatenate(fs), n_traj, n_points, s_clean, sdot_clean)


DATASET_MAGIC = "comlab-dataset 1"


def save_dataset(ds: Dataset, path) -> None:
    """Header lines ``# key: value`` followed by a CSV body."""
    n_s, n_f = ds.n_s, ds.n_f
    cols = ["t"] + [f"s_{i}" for i in range(n_s)] + [f"sdot_{i}" for i in range(n_s)] + [f"F_{i}" for i in range(n_f)]
    lines = [
        f"# {DATASET_MAGIC}",
        f"# system: {ds.system}",
        f"# sigma: {ds.sigma!r}",
        f"# seed: {ds.seed}",
        f"# n_traj: {ds.n_traj}",
        f"# n_points: {ds.n_points}",
        f"# n_samples: {len(ds)}",
        f"# n_s: {n_s}",
        f"# n_f: {n_f}",
        ",".join(cols),
    ]
    body = np.concatenate([ds.t[:, None], ds.s, ds.sdot, ds.F], axis=1)
    for row in body:
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    header = {}
    rows = []
    cols = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if val:
                header[key.strip()] = val.strip()
            continue
        if cols is None:
            cols = line.split(",")
            continue
        if line:
            rows.append([float(x) for x in line.split(",")])
    for key in ("system", "sigma", "seed", "n_s", "n_f", "n_traj", "n_points"):
        if key not in header:
            raise ValueError(f"dataset header: missing field {key!r}")
    n_s, n_f = int(header["n_s"]), int(header["n_f"])
    data = np.array(rows, dtype=float).reshape(-1, 1 + 2 * n_s + n_f)
    if "n_samples" in header and int(header["n_samples"]) != len(data):
        raise ValueError(f"dataset body: expected {header['n_samples']} rows, found {len(data)}")
    return Dataset(
        header["system"], float(header["sigma"]), int(header["seed"]),
        data[:, 0], data[:, 1:1 + n_s], data[:, 1 + n_s:1 + 2 * n_s], data[:, 1 + 2 * n_s:],
        int(header["n_traj"]), int(header["n_points"]),
    )
