import math

import numpy as np
import pytest

from ergokit.core import (GibbsMeasure, ModelParams, PhasePoint, Potential,
                          ValidationError, gibbs_moments, micro_gap,
                          tensor_quadrature, validate_model)


@pytest.fixture(scope="module")
def harmonic():
    return Potential.quadratic([0.5])


def test_validate_standard_gaussian(harmonic):
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    vm = validate_model(p, harmonic)
    assert abs(vm.checks["normalization_mass"] - 1.0) < 1e-4
    assert vm.measure.velocity_marginal == "gaussian"


def test_alpha_must_be_positive():
    with pytest.raises(ValidationError, match="alpha must be positive"):
        ModelParams(model="langevin", d=1, alpha=-1.0, beta=1.0)


def test_fiber_requires_d2():
    with pytest.raises(ValidationError, match="d >= 2"):
        ModelParams(model="fiber", d=1, sigma=1.0)


def test_unnormalized_potential_rejected():
    phi = Potential.user(1, lambda x: 0.5 * x[..., 0] ** 2, lambda x: x)
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    with pytest.raises(ValidationError, match="expected 1"):
        validate_model(p, phi)


def test_gradient_mismatch_detected():
    phi = Potential.user(
        1,
        lambda x: 0.5 * x[..., 0] ** 2 + 0.5 * math.log(2 * math.pi),
        lambda x: 3.0 * x,  # wrong gradient
    )
    p = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
    with pytest.raises(ValidationError, match="finite differences"):
        validate_model(p, phi)


def test_gauss_moments_match_stated_values(harmonic):
    m1 = GibbsMeasure(harmonic, ModelParams(model="langevin", d=1, beta=1.0))
    assert gibbs_moments(m1, "square_l2sq") == 3.0
    m2 = GibbsMeasure(harmonic, ModelParams(model="langevin", d=1, beta=2.0))
    assert gibbs_moments(m2, "pair_l2sq", 0, 1) == 0.25
    # closed form, no quadrature: beta^2 * E[omega^4] = 3 exactly
    for beta in (0.5, 1.0, 3.0, 7.5):
        m = GibbsMeasure(harmonic, ModelParams(model="langevin", d=1, beta=beta))
        assert gibbs_moments(m, "square_l2sq") * beta ** 2 == 3.0


def test_sphere_moments():
    phi3 = Potential.quadratic([0.5] * 3)
    m = GibbsMeasure(phi3, ModelParams(model="fiber", d=3, sigma=1.0))
    assert gibbs_moments(m, "cross_mean", 0, 0) == pytest.approx(1.0 / 3.0)
    assert gibbs_moments(m, "cross_mean", 0, 1) == 0.0
    assert gibbs_moments(m, "square_l2sq") == pytest.approx(3.0 / 15.0)
    with pytest.raises(ValidationError):
        gibbs_moments(m, "pair_l2sq", 1, 1)
    with pytest.raises(ValidationError):
        gibbs_moments(m, "no-such-moment")


def test_quadratic_derivatives_match_finite_differences():
    phi = Potential.quadratic([0.5, 2.0])
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, size=(16, 2))
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (phi.eval_fn(pts + e) - phi.eval_fn(pts - e)) / (2 * h)
        ana = phi.grad_fn(pts)[:, i]
        assert np.max(np.abs(fd - ana) / np.maximum(np.abs(ana), 1.0)) < 1e-6
        fd2 = (phi.grad_fn(pts + e) - phi.grad_fn(pts - e)) / (2 * h)
        ana2 = phi.hessian_fn(pts)[:, :, i]
        assert np.max(np.abs(fd2 - ana2)) < 1e-6


def test_lj_pair_domain_and_gradient():
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    same = np.array([[0.3, 0.3]])
    assert not lj.in_domain(same)[0]
    pts = np.array([[-0.5, 0.5], [-1.0, 0.2]])
    assert lj.in_domain(pts).all()
    h = 1e-7
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (lj.eval_fn(pts + e) - lj.eval_fn(pts - e)) / (2 * h)
        ana = lj.grad_fn(pts)[:, i]
        assert np.max(np.abs(fd - ana) / np.abs(ana)) < 1e-5


def test_lj_normalization():
    from ergokit.core import partition_mass
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    assert partition_mass(lj) == pytest.approx(1.0, abs=1e-10)
    # independent coarse oracle: plain tensor rule on the full box
    mass2d = tensor_quadrature(
        lambda x: np.exp(-np.minimum(lj.eval_fn(x), 700.0)),
        lj.default_box(), 320)
    assert mass2d == pytest.approx(1.0, abs=5e-3)


def test_phase_point_sphere_constraint():
    PhasePoint(x=np.zeros(2), omega=np.array([0.6, 0.8]), spherical=True)
    with pytest.raises(ValidationError, match="exceeds 1e-12"):
        PhasePoint(x=np.zeros(2), omega=np.array([0.6, 0.81]), spherical=True)


def test_micro_gap_values():
    assert micro_gap(ModelParams(model="langevin", d=1, alpha=2.5, beta=1.0)) == 2.5
    assert micro_gap(ModelParams(model="fiber", d=3, sigma=2.0)) == 4.0
