import math

import numpy as np
import pytest

from ergokit.core import (GibbsMeasure, ModelParams, Observable, Potential,
                          ValidationError)
from ergokit.ergodicity import (EnsembleConfig, EnsembleError, SamplerSpec,
                                invariance_check, microscopic_bound_check,
                                observable_stats, qv_check, run_ensemble,
                                sample_initial)
from ergokit.integrators import IntegratorConfig


@pytest.fixture(scope="module")
def harmonic_model():
    phi = Potential.quadratic([0.5])
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    return p, phi, GibbsMeasure(potential=phi, params=p)


def test_exact_gaussian_sampling(harmonic_model):
    p, phi, meas = harmonic_model
    init = sample_initial(meas, 100_000, SamplerSpec(), seed=1)
    n = init.x.shape[0]
    assert abs(init.x.mean()) < 3.0 / math.sqrt(n)
    assert abs(init.x.var() - 1.0) < 3.0 * math.sqrt(2.0 / n)
    assert abs(init.omega.var() - 1.0) < 3.0 * math.sqrt(2.0 / n)
    assert init.diagnostics["sampler"] == "exact-gaussian"


def test_sphere_sampling_exact_norm():
    phi = Potential.quadratic([0.5] * 3)
    p = ModelParams(model="fiber", d=3, sigma=1.0)
    meas = GibbsMeasure(potential=phi, params=p)
    init = sample_initial(meas, 100_000, SamplerSpec(), seed=2)
    assert np.max(np.abs(np.linalg.norm(init.omega, axis=1) - 1.0)) < 1e-14
    for i in range(3):
        assert abs(init.omega[:, i].mean()) < 3.0 * math.sqrt((1 / 3) / 1e5)


def test_metropolis_sampler_auto_scaling():
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    p = ModelParams(model="langevin", d=1, n_particles=2, alpha=1.0, beta=1.0)
    meas = GibbsMeasure(potential=lj, params=p)
    # a hopeless proposal scale must be auto-rescaled into the window
    spec = SamplerSpec(kind="metropolis", burn_in=1500, proposal_scale=50.0,
                       thinning=10)
    init = sample_initial(meas, 4000, spec, seed=3)
    assert 0.1 <= init.diagnostics["acceptance_rate"] <= 0.7
    assert init.diagnostics["proposal_scale"] < 50.0
    assert lj.in_domain(init.x).all()
    # moments agree with the quadrature values within the 5 SE gate
    assert max(init.diagnostics["moment_z"]) < 5.0


def test_constant_observable_gives_exact_zero_error(harmonic_model):
    p, phi, meas = harmonic_model
    one = Observable(eval_fn=lambda x, om: np.ones(x.shape[0]),
                     known_mean=1.0, known_l2=1.0, name="one")
    cfg = EnsembleConfig(paths=64, horizon=1.0, checkpoints=(0.5, 1.0),
                         observable=one,
                         integrator=IntegratorConfig(dt=1e-3, seed=4))
    run = run_ensemble(cfg, p, phi)
    assert np.all(run.rms_error[1:] == 0.0)
    assert np.all(run.avg_dev[1:] == 0.0)


def test_generic_observable_path_matches_coded(harmonic_model):
    # the step-at-a-time driver for uncoded observables reproduces the
    # compiled accumulator exactly (same noise, same trapezoid)
    p, phi, meas = harmonic_model
    coded = Observable.coordinate("omega", 0, meas)
    generic = Observable(eval_fn=lambda x, om: om[:, 0],
                         generator_eval=lambda x, om: -om[:, 0] - x[:, 0],
                         known_mean=0.0, known_l2=1.0, name="omega0-generic")
    runs = {}
    for name, obs in (("coded", coded), ("generic", generic)):
        cfg = EnsembleConfig(paths=100, horizon=0.5, checkpoints=(0.25, 0.5),
                             observable=obs,
                             integrator=IntegratorConfig(dt=1e-3, seed=6))
        runs[name] = run_ensemble(cfg, p, phi)
    assert np.allclose(runs["coded"].avg_dev[1:], runs["generic"].avg_dev[1:],
                       rtol=0, atol=1e-13)
    assert np.allclose(runs["coded"].martingale[1:],
                       runs["generic"].martingale[1:], rtol=0, atol=1e-12)


def test_qv_trivial_for_constant(harmonic_model):
    p, phi, meas = harmonic_model
    one = Observable(eval_fn=lambda x, om: np.ones(x.shape[0]),
                     generator_eval=lambda x, om: np.zeros(x.shape[0]),
                     known_mean=1.0, known_l2=1.0, name="one")
    cfg = EnsembleConfig(paths=64, horizon=1.0, checkpoints=(1.0,),
                         observable=one,
                         integrator=IntegratorConfig(dt=1e-3, seed=7))
    run = run_ensemble(cfg, p, phi)
    rows = qv_check(run, 0.0)
    assert rows[0]["simulated"] == 0.0
    assert rows[0]["target"] == 0.0


def test_microscopic_bound_small_run(harmonic_model):
    p, phi, meas = harmonic_model
    obs = Observable.coordinate("omega", 0, meas)
    cfg = EnsembleConfig(paths=3000, horizon=2.0, checkpoints=(1.0, 2.0),
                         observable=obs,
                         integrator=IntegratorConfig(dt=1e-3, seed=8))
    run = run_ensemble(cfg, p, phi)
    rows = microscopic_bound_check(run, micro_gap=1.0, f_l2sq=1.0)
    assert all(r["pass"] for r in rows)
    assert rows[0]["bound"] == 2.0


def test_invariance_negative_control(harmonic_model):
    p, phi, meas = harmonic_model
    obs = Observable.coordinate("x", 0, meas)
    cfg = EnsembleConfig(paths=4000, horizon=0.2, checkpoints=(0.1, 0.2),
                         observable=obs, velocity_scale=2.0,
                         integrator=IntegratorConfig(dt=1e-3, seed=9))
    run = run_ensemble(cfg, p, phi)
    rows = invariance_check(run, meas)
    assert not rows[0]["pass"]  # flagged already at time zero
    assert rows[0]["checks"]["om0_sq"] > 4.0


def test_observable_stats_quadrature_route(harmonic_model):
    p, phi, meas = harmonic_model
    obs = Observable(eval_fn=lambda x, om: x[:, 0] ** 2, name="x2")
    mean, centered, tag = observable_stats(obs, meas)
    assert tag == "quadrature"
    assert mean == pytest.approx(1.0, abs=1e-10)
    assert centered == pytest.approx(math.sqrt(2.0), rel=1e-8)


def test_invalid_budget_enforced():
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    p = ModelParams(model="langevin", d=1, n_particles=2, alpha=1.0, beta=1.0)
    meas = GibbsMeasure(potential=lj, params=p)
    obs = Observable.coordinate("x", 0, meas)
    # coarse steps plus a tight cap and no refinement headroom kill paths
    cfg = EnsembleConfig(
        paths=200, horizon=3.0, checkpoints=(3.0,), observable=obs,
        sampler=SamplerSpec(kind="metropolis", burn_in=400,
                            proposal_scale=0.4),
        integrator=IntegratorConfig(dt=0.05, seed=10, force_cap=150.0,
                                    max_refinements=1))
    with pytest.raises(EnsembleError, match="invalid paths"):
        run_ensemble(cfg, p, phi=lj)


def test_checkpoint_validation(harmonic_model):
    p, phi, meas = harmonic_model
    obs = Observable.coordinate("x", 0, meas)
    with pytest.raises(ValidationError):
        EnsembleConfig(paths=10, horizon=1.0, checkpoints=(0.5, 0.5),
                       observable=obs, integrator=IntegratorConfig(seed=0))
    with pytest.raises(ValidationError):
        EnsembleConfig(paths=1, horizon=1.0, checkpoints=(0.5,),
                       observable=obs, integrator=IntegratorConfig(seed=0))
