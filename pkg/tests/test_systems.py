import math

import numpy as np
import pytest

from comlab.evaluation import constant_drift
from comlab.seeding import substream
from comlab.systems import (SYSTEMS, ForceCoefficients, IntegrationError, derivative, external_force,
                            generate_dataset, get_system, integrate, load_dataset, save_dataset,
                            system_rule, true_constants)


def test_mass_spring_derivative_and_energy():
    ms = get_system("mass-spring")
    np.testing.assert_array_equal(derivative(ms, [1.0, 0.0]), [0.0, -1.0])
    assert true_constants(ms, [1.0, 0.0])[0] == 0.5


def test_lotka_volterra_fixed_point():
    lv = get_system("lotka-volterra")
    np.testing.assert_array_equal(derivative(lv, [1.0, 1.0]), [0.0, 0.0])
    assert true_constants(lv, [1.0, 1.0])[0] == 2.0


def test_two_body_circular_orbit_hand_oracle():
    tb = get_system("two-body")
    v = math.sqrt(0.5)
    s = np.array([0.5, 0.0, -0.5, 0.0, 0.0, v, 0.0, -v])
    expected = [0.0, v, 0.0, -v, -1.0, 0.0, 1.0, 0.0]
    np.testing.assert_allclose(derivative(tb, s), expected, atol=1e-15)


def test_two_body_collision_raises():
    tb = get_system("two-body")
    with pytest.raises(ValueError):
        derivative(tb, np.zeros(8))


def test_unknown_system_lists_names():
    with pytest.raises(ValueError, match="mass-spring"):
        get_system("triple-pendulum")


def test_counts():
    expected = {"mass-spring": (2, 1), "2d-pendulum": (4, 3), "damped-pendulum": (4, 2),
                "two-body": (8, 7), "nonlinear-spring-2d": (4, 2), "lotka-volterra": (2, 1)}
    for name, (n_s, n_c) in expected.items():
        sd = get_system(name)
        assert (sd.n_s, sd.n_c_true) == (n_s, n_c)
        s0 = sd.ic_sampler(np.random.default_rng(0))
        assert true_constants(sd, s0).shape == (n_c,)


def test_external_force():
    t = np.linspace(0, 10, 101)
    assert np.all(external_force(t, 0.0, 2.0, 1.0) == 0.0)
    assert external_force(0.0, 0.3, 4.0, 0.0)[0] == 0.3
    assert np.all(np.abs(external_force(t, -0.4, 3.3, 1.2)) <= 0.4)
    c = ForceCoefficients.sample(np.random.default_rng(0))
    assert -0.5 <= c.a0 <= 0.5 and 0 <= c.a1 <= 5 and 0 <= c.a2 <= 2 * math.pi


def test_rk4_mass_spring_period():
    ms = get_system("mass-spring")
    traj = integrate(system_rule(ms), [1.0, 0.0], (0.0, 2 * math.pi), "rk4", dt=1e-3)
    np.testing.assert_allclose(traj.s[-1], [1.0, 0.0], atol=1e-6)


def test_zero_rule_constant_trajectory():
    traj = integrate(lambda t, s: np.zeros_like(s), [1.0, 2.0, 3.0], (0, 5), "rk45",
                     t_eval=np.linspace(0, 5, 11))
    assert np.all(traj.s == [1.0, 2.0, 3.0])


def test_rk45_vs_rk4_pendulum():
    pend = get_system("2d-pendulum")
    s0 = pend.ic_sampler(np.random.default_rng(3))
    t = np.linspace(0, 10, 21)
    a = integrate(system_rule(pend), s0, (0, 10), "rk45", t_eval=t)
    b = integrate(system_rule(pend), s0, (0, 10), "rk4", dt=1e-3, t_eval=t)
    assert np.max(np.abs(a.s - b.s)) <= 1e-5


def test_rk4_drift_along_trajectories():
    for name in ("mass-spring", "2d-pendulum", "nonlinear-spring-2d", "lotka-volterra"):
        sd = get_system(name)
        s0 = sd.ic_sampler(np.random.default_rng(1))
        traj = integrate(system_rule(sd), s0, (0, 10), "rk4", dt=1e-3, t_eval=np.linspace(0, 10, 101))
        c = true_constants(sd, traj.s)
        assert np.max(np.abs(c - c[0])) <= 1e-6, name


def test_integration_failure_is_reported():
    with pytest.raises(IntegrationError, match="stiff or singular"):
        integrate(lambda t, s: s * s, [1.0], (0.0, 2.0), "rk45")


def test_unknown_method():
    with pytest.raises(ValueError):
        integrate(lambda t, s: s, [1.0], (0, 1), "euler")


@pytest.mark.parametrize("name", [n for n, sd in SYSTEMS.items() if sd.conserved_checked])
def test_conservation_oracle(name):
    sd = get_system(name)
    s0 = np.stack([sd.ic_sampler(substream(0, "oracle", i)) for i in range(100)])
    t = np.linspace(0.0, 10.0, 201)
    worst = 0.0
    for x0 in s0:
        traj = integrate(system_rule(sd), x0, (0, 10), "rk45", rtol=1e-11, atol=1e-12, t_eval=t)
        # constants whose value is itself below the tolerance are judged absolutely
        res = constant_drift(sd.constants, traj.s, zero_tol=1e-6)
        worst = max(worst, float(res.drift.max()))
    assert worst <= 1e-6


def test_forced_pendulum_energy_not_conserved():
    sd = get_system("forced-2d-pendulum")
    force = ForceCoefficients(0.5, 1.0, 0.0)
    s0 = sd.ic_sampler(np.random.default_rng(0))
    traj = integrate(system_rule(sd, force), s0, (0, 10), "rk45", t_eval=np.linspace(0, 10, 201))
    energy = true_constants(sd, traj.s)[:, 0]
    assert energy.max() - energy.min() > 1e-3


def test_dataset_sigma_zero_exact():
    ds = generate_dataset("mass-spring", 3, 10.0, 7, 0.0, seed=2)
    assert len(ds) == 21
    np.testing.assert_array_equal(ds.sdot, derivative(get_system("mass-spring"), ds.s))


def test_dataset_noise_std():
    ds = generate_dataset("lotka-volterra", 500, 10.0, 100, 0.1, seed=5)
    resid = (ds.s - ds.s_clean).ravel()
    assert len(ds) * 2 >= 10**5
    assert abs(resid.std() - 0.1) <= 0.005
    assert abs((ds.sdot - ds.sdot_clean).std() - 0.1) <= 0.005


def test_dataset_deterministic_and_roundtrip(tmp_path):
    a = generate_dataset("forced-2d-pendulum", 3, 10.0, 5, 0.05, seed=9)
    b = generate_dataset("forced-2d-pendulum", 3, 10.0, 5, 0.05, seed=9)
    assert a.s.tobytes() == b.s.tobytes() and a.F.tobytes() == b.F.tobytes()
    assert a.F.shape == (15, 1)
    path = tmp_path / "d.csv"
    save_dataset(a, path)
    c = load_dataset(path)
    assert (c.system, c.sigma, c.seed) == (a.system, a.sigma, a.seed)
    for field in ("t", "s", "sdot", "F"):
        assert getattr(c, field).tobytes() == getattr(a, field).tobytes()
    header = path.read_text().splitlines()[:8]
    assert any("sigma: 0.05" in line for line in header)


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        generate_dataset("mass-spring", 1, 1.0, 2, -1.0, seed=0)
