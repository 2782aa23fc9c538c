import math

import numpy as np
import pytest

from ergokit.core import ModelParams, Potential, ValidationError
from ergokit.operators import position_family
from ergokit.spectral import (GridSpec, analytic_kato_constants,
                              assemble_generator, check_sufficient_criteria,
                              estimate_kato_constants, spectral_gap)


@pytest.fixture(scope="module")
def ou_potential():
    return Potential.quadratic([0.5])


def test_grid_spec_validation():
    with pytest.raises(ValidationError):
        GridSpec(extents=((-1.0, 1.0),), nodes=(4,))
    with pytest.raises(ValidationError):
        GridSpec(extents=((-1.0, 1.0),), nodes=(16,), boundary="weird")


def test_assembly_symmetry_and_kernel(ou_potential):
    grid = GridSpec(extents=((-8.0, 8.0),), nodes=(257,))
    op = assemble_generator(ou_potential, grid)
    assert op.asymmetry <= 1e-13
    assert op.kernel_residual <= 1e-12
    assert op.masked_nodes == 0


def test_masked_assembly_keeps_only_admissible_nodes():
    # one-sided grid over the pair separation of the Lennard-Jones scenario;
    # every retained node must satisfy phi < cutoff (brute-force check)
    eps, sg = 0.3, 0.6

    def pair(x):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            s6 = (sg / x[..., 0]) ** 6
            v = 4 * eps * s6 * (s6 - 1)
        return np.where(x[..., 0] > 0, v + x[..., 0] ** 2, np.inf)

    def pair_grad(x):
        s6 = (sg / x[..., 0]) ** 6
        return np.stack([4 * eps * s6 * (6 - 12 * s6) / x[..., 0]
                         + 2 * x[..., 0]], axis=-1)

    phi = Potential.user(1, pair, pair_grad, box_hint=((0.05, 4.0),))
    cutoff = 60.0
    grid = GridSpec(extents=((0.05, 4.0),), nodes=(257,), mask_cutoff=cutoff)
    op = assemble_generator(phi, grid)
    assert op.masked_nodes > 0
    axis = grid.axes()[0]
    vals = pair(axis[:, None])
    assert np.array_equal(op.keep, vals < cutoff)
    assert op.size == int((vals < cutoff).sum())
    assert op.kernel_residual <= 1e-12


def test_disconnected_mask_raises():
    # a deep masked wall in the middle splits the admissible set
    def wall(x):
        return np.where(np.abs(x[..., 0]) < 0.2, np.inf, 0.5 * x[..., 0] ** 2)

    phi = Potential.user(1, wall, lambda x: x, box_hint=((-4.0, 4.0),))
    grid = GridSpec(extents=((-4.0, 4.0),), nodes=(129,))
    with pytest.raises(ValidationError, match="component"):
        assemble_generator(phi, grid)


def test_ou_gap_matches_hermite_oracle(ou_potential):
    # oracle: the overdamped generator of the standard Gaussian is the
    # number operator in the Hermite basis, spectrum {0, 1, 2, ...}
    grid = GridSpec(extents=((-8.0, 8.0),), nodes=(257,))
    res = spectral_gap(ou_potential, grid)
    assert abs(res.gap - 1.0) < 0.01
    assert abs(res.extrapolated - 1.0) < 1e-4
    # error shrinks monotonically along the refinement ladder
    errs = [abs(g - 1.0) for _, g in res.history]
    assert errs[0] > errs[1] > errs[2]


def test_axis_scaled_gap():
    # per-axis closed form: gap of a x^2 is 2a
    phi = Potential.quadratic([2.0])
    grid = GridSpec(extents=((-4.0, 4.0),), nodes=(257,))
    res = spectral_gap(phi, grid)
    assert abs(res.gap - 4.0) / 4.0 < 0.01


def test_separable_2d_gap_is_min_of_axes():
    phi = Potential.quadratic([0.5, 2.0])
    grid = GridSpec(extents=((-8.0, 8.0), (-4.0, 4.0)), nodes=(129, 129))
    res = spectral_gap(phi, grid)
    assert abs(res.gap - 1.0) < 0.02


def test_periodic_flat_gap():
    phi = Potential.free(1)
    r = 2.0 * math.pi
    grid = GridSpec(extents=((0.0, r),), nodes=(128,), boundary="periodic")
    res = spectral_gap(phi, grid)
    # closed-form circulant eigenvalue at finite resolution
    h = r / 128
    expected = (2.0 / h ** 2) * (1.0 - math.cos(2.0 * math.pi * h / r))
    assert res.gap == pytest.approx(expected, rel=1e-9)
    assert abs(res.extrapolated - 1.0) < 1e-4


def test_analytic_kato_values(ou_potential):
    est = analytic_kato_constants(ou_potential, "langevin")
    assert est.constants == {"a_hess": 1.0, "b_hess": 0.0,
                             "a_drift": 2.0, "b_drift": 0.0}
    est2 = analytic_kato_constants(Potential.quadratic([0.5, 0.5]), "fiber", d=2)
    assert est2.constants == {"a_mixed": 6.0, "b_mixed": 1.0}
    with pytest.raises(ValidationError):
        analytic_kato_constants(Potential.quadratic([1.0]), "langevin")


def test_estimated_kato_is_lower_bound(ou_potential):
    est = estimate_kato_constants(ou_potential, "langevin", prefer_analytic=False)
    assert est.status == "estimated-lower-bound"
    c = est.constants
    assert 0.0 < c["a_hess"] <= 1.0 and c["b_hess"] == 0.0
    assert 0.0 < c["a_drift"] <= 2.0 and c["b_drift"] == 0.0
    phif = Potential.quadratic([0.5, 0.5])
    estf = estimate_kato_constants(phif, "fiber", d=2, prefer_analytic=False)
    assert estf.constants["a_mixed"] <= 6.0
    # analytic shortcut engages for the unit quadratic
    auto = estimate_kato_constants(ou_potential, "langevin")
    assert auto.status == "analytic"


def test_kato_equality_attained_on_singleton_family(ou_potential):
    fam = position_family(ou_potential, n_members=1, seed=3)
    est = estimate_kato_constants(ou_potential, "langevin", family=fam,
                                  prefer_analytic=False)
    # with one member and b = 0, a * ||G f|| equals the bounded sum exactly
    f = fam[0]
    from ergokit.operators import gauss_hermite_position_rule
    xn, xw = gauss_hermite_position_rule([0.5], 60)

    def nrm(v):
        return math.sqrt(float(np.sum(xw * v * v)))

    lhs = nrm(f.dxx(xn, None)[:, 0, 0])
    gen = nrm(f.dxx(xn, None)[:, 0, 0] - xn[:, 0] * f.dx(xn, None)[:, 0])
    assert est.constants["a_hess"] * gen == pytest.approx(lhs, rel=1e-12)


def test_empty_family_rejected(ou_potential):
    with pytest.raises(ValidationError, match="at least one"):
        estimate_kato_constants(ou_potential, "langevin", family=[],
                                prefer_analytic=False)


def test_sufficient_criteria_quadratic(ou_potential):
    s = check_sufficient_criteria(ou_potential,
                                  np.linspace(-4, 4, 81)[:, None],
                                  threshold=1.5)
    # |phi''| / (1 + |phi'|) = 1 / (1 + |x|), maximized at the origin
    assert s["c_hat"] == pytest.approx(1.0)
    assert s["pass"]
    phi2 = Potential.quadratic([0.5, 2.0])
    grid = np.stack(np.meshgrid(np.linspace(-3, 3, 31),
                                np.linspace(-3, 3, 31)), axis=-1).reshape(-1, 2)
    s2 = check_sufficient_criteria(phi2, grid, threshold=4.0)
    assert s2["c_hat"] == pytest.approx(2.0 * 2.0)


def test_sufficient_criteria_lj_fails():
    # the ratio grows like 1/separation toward the core: unbounded, so the
    # Hessian-growth criterion fails for any finite threshold
    lj = Potential.lj_pair_harmonic(a=1.0, epsilon=0.3, sigma=0.6)
    d = np.geomspace(1e-8, 1.0, 25)
    pts = np.stack([d / 2, -d / 2], axis=1)
    rep = check_sufficient_criteria(lj, pts, threshold=1e6)
    assert not rep["pass"]
    assert rep["c_hat"] > 1e6
    # and the ratio is indeed increasing as the pair approaches contact
    singles = [check_sufficient_criteria(lj, pts[i:i + 1], threshold=1.0)["c_hat"]
               for i in (0, 12, 24)]
    assert singles[0] > singles[1] > singles[2]


def test_missing_hessian_raises():
    phi = Potential.user(1, lambda x: 0.5 * x[..., 0] ** 2, lambda x: x)
    with pytest.raises(ValidationError, match="hessian"):
        check_sufficient_criteria(phi, np.zeros((1, 1)))
