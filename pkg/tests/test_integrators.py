import math
import os

import numpy as np
import pytest
import scipy.linalg

from ergokit import _kernels as K
from ergokit.core import ModelParams, PhasePoint, Potential
from ergokit.integrators import (IntegratorConfig, IntegrationError,
                                 NoiseStream, fiber_step, langevin_step,
                                 simulate_ensemble)


def test_noise_keying_is_pure():
    ns = NoiseStream(seed=7, path=3)
    a = ns.normal(step=11, draw=2)
    b = ns.normal(step=11, draw=2)
    assert a == b
    assert ns.normal(11, 3) != a
    assert NoiseStream(seed=7, path=4).normal(11, 2) != a
    assert NoiseStream(seed=8, path=3).normal(11, 2) != a
    # scalar and vectorized evaluation agree bit for bit
    arr = ns.normals(step=11, n=5)
    assert arr[2] == a


def test_noise_is_standard_normal():
    z = K.keyed_normals(123, np.arange(20000, dtype=np.uint64)[:, None], 5,
                        np.arange(8, dtype=np.uint64)[None, :]).ravel()
    n = z.size
    assert abs(z.mean()) < 4.0 / math.sqrt(n)
    assert abs(z.var() - 1.0) < 4.0 * math.sqrt(2.0 / n)
    assert abs(np.mean(z ** 3)) < 5.0 * math.sqrt(15.0 / n)
    assert abs(np.mean(z ** 4) - 3.0) < 5.0 * math.sqrt(96.0 / n)


def test_em_step_deterministic_part():
    # the Euler step decomposes exactly into drift plus the scaled draw
    phi = Potential.quadratic([0.5])
    p = ModelParams(model="langevin", d=1, alpha=1.3, beta=0.8)
    dt = 1e-2
    cfg = IntegratorConfig(scheme="euler", dt=dt, seed=5)
    pt = PhasePoint(x=np.array([0.4]), omega=np.array([-0.7]))
    out = langevin_step(pt, cfg, p, phi, NoiseStream(seed=5, path=0), step_index=0)
    z = NoiseStream(seed=5, path=0).normal(0, 0)
    g = phi.grad_fn(pt.x[None, :])[0]
    x_exp = pt.x + dt * pt.omega
    om_exp = (pt.omega + dt * (-p.alpha * pt.omega - g / p.beta)
              + math.sqrt(2.0 * p.alpha / p.beta) * math.sqrt(dt) * z)
    assert np.array_equal(out.x, x_exp)
    assert np.array_equal(out.omega, om_exp)


def test_free_velocity_refresh_variance():
    # zero force: the velocity refresh is an exact transition with damping
    # exp(-alpha dt) and variance (1/beta)(1 - exp(-2 alpha dt))
    phi = Potential.free(1)
    alpha, beta, dt = 2.0, 1.5, 0.05
    p = ModelParams(model="langevin", d=1, alpha=alpha, beta=beta)
    cfg = IntegratorConfig(scheme="baoab", dt=dt, seed=11)
    n = 100_000
    x0 = np.zeros((n, 1))
    om0 = np.zeros((n, 1))
    out = simulate_ensemble(p, phi, cfg, x0, om0, [1], ("omega", 0), 0.0)
    om1 = out["snaps_om"][0][:, 0]
    var_exp = (1.0 - math.exp(-2 * alpha * dt)) / beta
    se = var_exp * math.sqrt(2.0 / n)
    assert abs(om1.var() - var_exp) < 3.0 * se
    assert abs(om1.mean()) < 3.0 * math.sqrt(var_exp / n)


@pytest.mark.parametrize("T", [1.0, 10.0])
def test_invariant_measure_preserved_langevin(T):
    phi = Potential.quadratic([0.5])
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    cfg = IntegratorConfig(scheme="baoab", dt=1e-3, seed=21)
    rng = np.random.default_rng(0)
    n = 20_000
    x0 = rng.standard_normal((n, 1))
    om0 = rng.standard_normal((n, 1))
    steps = int(T / cfg.dt)
    out = simulate_ensemble(p, phi, cfg, x0, om0, [steps], ("x", 0), 0.0)
    xs = out["snaps_x"][0][:, 0]
    oms = out["snaps_om"][0][:, 0]
    for v, name in ((xs, "x"), (oms, "om")):
        assert abs(v.mean()) < 3.0 / math.sqrt(n), name
        assert abs(v.var() - 1.0) < 3.0 * math.sqrt(2.0 / n), name


@pytest.mark.parametrize("T", [1.0, 10.0])
def test_invariant_measure_preserved_fiber(T):
    phi = Potential.quadratic([0.5, 0.5])
    p = ModelParams(model="fiber", d=2, sigma=1.0)
    cfg = IntegratorConfig(scheme="tangent-heun", dt=1e-3, seed=22)
    rng = np.random.default_rng(1)
    n = 20_000
    x0 = rng.standard_normal((n, 2))
    g = rng.standard_normal((n, 2))
    om0 = g / np.linalg.norm(g, axis=1, keepdims=True)
    steps = int(T / cfg.dt)
    out = simulate_ensemble(p, phi, cfg, x0, om0, [steps], ("x", 0), 0.0)
    xs = out["snaps_x"][0]
    oms = out["snaps_om"][0]
    assert np.max(np.abs(np.linalg.norm(oms, axis=1) - 1.0)) <= 1e-15
    for i in range(2):
        assert abs(xs[:, i].mean()) < 3.0 / math.sqrt(n)
        assert abs(xs[:, i].var() - 1.0) < 3.0 * math.sqrt(2.0 / n)
        assert abs(oms[:, i].mean()) < 3.0 * math.sqrt(0.5 / n)
        assert abs((oms[:, i] ** 2).mean() - 0.5) < 3.0 * math.sqrt(0.25 / n)


def test_circle_heat_kernel_decay():
    # flat potential, d=2: the velocity is Brownian motion on the circle,
    # E[omega_t . omega_0] = exp(-sigma^2 t / 2)
    phi = Potential.free(2)
    p = ModelParams(model="fiber", d=2, sigma=1.0)
    cfg = IntegratorConfig(scheme="tangent-heun", dt=1e-3, seed=33)
    rng = np.random.default_rng(5)
    n = 10_000
    g = rng.standard_normal((n, 2))
    om0 = g / np.linalg.norm(g, axis=1, keepdims=True)
    x0 = np.zeros((n, 2))
    out = simulate_ensemble(p, phi, cfg, x0, om0, [1000], ("omega", 0), 0.0)
    omt = out["snaps_om"][0]
    corr = np.sum(omt * om0, axis=1)
    target = math.exp(-0.5)
    se = corr.std() / math.sqrt(n)
    assert abs(corr.mean() - target) < 3.0 * se + 2e-3


def test_sphere_uniform_stationary_d3():
    phi = Potential.free(3)
    p = ModelParams(model="fiber", d=3, sigma=1.0)
    cfg = IntegratorConfig(scheme="tangent-heun", dt=1e-3, seed=44)
    rng = np.random.default_rng(6)
    n = 10_000
    g = rng.standard_normal((n, 3))
    om0 = g / np.linalg.norm(g, axis=1, keepdims=True)
    out = simulate_ensemble(p, phi, cfg, np.zeros((n, 3)), om0, [2000],
                            ("omega", 0), 0.0)
    omt = out["snaps_om"][0]
    assert np.max(np.abs(np.linalg.norm(omt, axis=1) - 1.0)) <= 1e-15
    for i in range(3):
        assert abs(omt[:, i].mean()) < 3.0 * math.sqrt((1 / 3) / n)
        assert abs((omt[:, i] ** 2).mean() - 1 / 3) < 3.0 * math.sqrt(0.2 / n)
    cross = (omt[:, 0] * omt[:, 1]).mean()
    assert abs(cross) < 3.0 * math.sqrt((1 / 15) / n)


def test_ito_variant_agrees_with_heun():
    # the explicit curvature-drift variant cross-validates the default
    phi = Potential.quadratic([0.5, 0.5])
    p = ModelParams(model="fiber", d=2, sigma=1.0)
    rng = np.random.default_rng(3)
    n = 10_000
    x0 = rng.standard_normal((n, 2))
    g = rng.standard_normal((n, 2))
    om0 = g / np.linalg.norm(g, axis=1, keepdims=True)
    stats = {}
    for scheme in ("tangent-heun", "tangent-ito"):
        cfg = IntegratorConfig(scheme=scheme, dt=1e-3, seed=55)
        out = simulate_ensemble(p, phi, cfg, x0, om0, [2000], ("x", 0), 0.0)
        stats[scheme] = out["snaps_x"][0].var(axis=0)
    assert np.allclose(stats["tangent-heun"], stats["tangent-ito"],
                       rtol=0.06)


def test_reproducibility_and_thread_independence():
    phi = Potential.quadratic([0.5])
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    cfg = IntegratorConfig(scheme="baoab", dt=1e-3, seed=77)
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((300, 1))
    om0 = rng.standard_normal((300, 1))
    outs = [simulate_ensemble(p, phi, cfg, x0, om0, [500], ("x", 0), 0.0,
                              threads=th) for th in (1, 1, 4)]
    for key in ("snaps_x", "snaps_om", "d_int", "l_int"):
        assert np.array_equal(outs[0][key], outs[1][key]), key
        assert np.array_equal(outs[0][key], outs[2][key]), key


def test_backends_agree():
    phi = Potential.quadratic([0.5])
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    cfg = IntegratorConfig(scheme="baoab", dt=1e-3, seed=13)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((200, 1))
    om0 = rng.standard_normal((200, 1))
    prev = os.environ.get("ERGOKIT_BACKEND")
    try:
        outs = {}
        for be in ("numba", "numpy"):
            os.environ["ERGOKIT_BACKEND"] = be
            outs[be] = simulate_ensemble(p, phi, cfg, x0, om0, [400],
                                         ("omega", 0), 0.0)
        # identical keyed noise; only libm rounding can differ
        assert np.allclose(outs["numba"]["snaps_x"], outs["numpy"]["snaps_x"],
                           rtol=0, atol=1e-12)
        assert np.allclose(outs["numba"]["d_int"], outs["numpy"]["d_int"],
                           rtol=0, atol=1e-12)
    finally:
        if prev is None:
            os.environ.pop("ERGOKIT_BACKEND", None)
        else:
            os.environ["ERGOKIT_BACKEND"] = prev


def test_weak_order_via_lyapunov_oracle():
    """Halving dt at least halves the stationary bias of E[x^2] for the
    Euler scheme on the harmonic model.

    Oracle: the Euler chain is linear Gaussian, so its exact stationary
    covariance solves a discrete Lyapunov equation; the simulated ensemble
    is validated against that oracle and the bias comparison itself is
    deterministic.
    """
    phi = Potential.quadratic([0.5])
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)

    def lyapunov_var_x(h):
        a = np.array([[1.0, h], [-h, 1.0 - h]])
        b = np.array([[0.0, 0.0], [0.0, 2.0 * h]])
        sig = scipy.linalg.solve_discrete_lyapunov(a, b)
        return sig[0, 0]

    biases = {h: abs(lyapunov_var_x(h) - 1.0) for h in (0.2, 0.1)}
    assert biases[0.1] <= 0.55 * biases[0.2]

    # the kernel matches the oracle within Monte-Carlo error
    h = 0.2
    n = 40_000
    rng = np.random.default_rng(12)
    x0 = rng.standard_normal((n, 1))
    om0 = rng.standard_normal((n, 1))
    cfg = IntegratorConfig(scheme="euler", dt=h, seed=99)
    out = simulate_ensemble(p, phi, cfg, x0, om0, [int(40 / h)], ("x", 0), 0.0)
    var_sim = out["snaps_x"][0][:, 0].var()
    var_exp = lyapunov_var_x(h)
    se = var_exp * math.sqrt(2.0 / n)
    assert abs(var_sim - var_exp) < 4.0 * se


def test_substepping_engages_near_singular_core():
    # large steps against the pair core must trigger refinement, and the
    # refined chain keeps the pair ordering (no silent crossings)
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    p = ModelParams(model="langevin", d=1, n_particles=2, alpha=1.0, beta=1.0)
    # deliberately coarse steps so proposals overshoot against the core
    cfg = IntegratorConfig(scheme="baoab", dt=0.03, seed=101, force_cap=300.0)
    rng = np.random.default_rng(8)
    n = 400
    sd = 1.0 / math.sqrt(2.0)
    x0 = rng.standard_normal((n, 2)) * sd
    x0[:, 1] = x0[:, 0] + 0.9  # start ordered and close
    om0 = rng.standard_normal((n, 2))
    out = simulate_ensemble(p, lj, cfg, x0, om0, [1000], ("x", 0), 0.0)
    assert out["refined_steps"].sum() > 0
    alive = out["final_alive"]
    assert alive.all()
    xs = out["snaps_x"][0][alive]
    assert np.all(xs[:, 1] > xs[:, 0])


def test_refinement_cap_flags_path():
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    p = ModelParams(model="langevin", d=1, n_particles=2, alpha=1.0, beta=1.0)
    # an absurdly small cap cannot be satisfied at any refinement level
    cfg = IntegratorConfig(scheme="baoab", dt=1e-2, seed=5, force_cap=1e-6,
                           max_refinements=3)
    pt = PhasePoint(x=np.array([-0.5, 0.5]), omega=np.array([1.0, -1.0]))
    with pytest.raises(IntegrationError):
        langevin_step(pt, cfg, p, lj, NoiseStream(seed=5, path=0))


def test_fiber_step_constraint_and_validation():
    phi = Potential.quadratic([0.5, 0.5])
    p = ModelParams(model="fiber", d=2, sigma=1.0)
    cfg = IntegratorConfig(scheme="tangent-heun", dt=1e-3, seed=1)
    pt = PhasePoint(x=np.zeros(2), omega=np.array([1.0, 0.0]), spherical=True)
    out = fiber_step(pt, cfg, p, phi, NoiseStream(seed=1, path=0))
    assert abs(np.linalg.norm(out.omega) - 1.0) <= 1e-15
    from ergokit.core import ValidationError
    with pytest.raises(ValidationError):
        fiber_step(PhasePoint(x=np.zeros(2), omega=np.array([2.0, 0.0])),
                   cfg, p, phi, NoiseStream(seed=1, path=0))
