"""Discretization of the overdamped generator and its spectral gap.

The operator laplacian - grad(phi) . grad is assembled in flux form on a
tensor grid: each face between neighboring nodes carries the weight
exp(-phi(midpoint)).  Conjugating by the square root of the node weights
exp(-phi(node)) makes the assembled matrix exactly symmetric, so the
computed gap is a true Rayleigh quotient in the weighted geometry and the
constant function is an exact kernel vector.

Also estimates the relative-boundedness constants of the second-derivative
and drift-gradient sums against the overdamped generator, which feed the
convergence-rate formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Potential, ValidationError
from .operators import (OperatorError, QuadratureScheme, TestFunction,
                        position_family)

__all__ = [
    "GridSpec",
    "DiscreteGenerator",
    "SpectralResult",
    "KatoEstimate",
    "assemble_generator",
    "spectral_gap",
    "estimate_kato_constants",
    "check_sufficient_criteria",
    "EigenSolveError",
]


class EigenSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid for the overdamped generator.

    extents: per-axis (lo, hi); for periodic axes the length is hi - lo and
    the rightmost node is identified with the leftmost.  ``mask_cutoff``
    masks nodes with phi above it (singular cores); masked faces are
    dropped, which is a zero-flux internal boundary.
    """

    extents: tuple
    nodes: tuple
    boundary: str = "zero-flux"  # or "periodic"
    mask_cutoff: float = 700.0

    def __post_init__(self):
        if self.boundary not in ("zero-flux", "periodic"):
            raise ValidationError("boundary", f"unknown boundary {self.boundary!r}")
        if any(n < 8 for n in self.nodes):
            raise ValidationError("grid-nodes", "need at least 8 nodes per axis")
        if len(self.extents) != len(self.nodes):
            raise ValidationError("grid-shape", "extents/nodes length mismatch")

    @property
    def dim(self):
        return len(self.nodes)

    def axes(self):
        out = []
        for (lo, hi), n in zip(self.extents, self.nodes):
            if self.boundary == "periodic":
                h = (hi - lo) / n
                out.append(lo + h * np.arange(n))
            else:
                out.append(np.linspace(lo, hi, n))
        return out

    def spacings(self):
        out = []
        for (lo, hi), n in zip(self.extents, self.nodes):
            out.append((hi - lo) / (n if self.boundary == "periodic" else n - 1))
        return out

    def coarsen(self):
        if self.boundary == "periodic":
            ns = tuple(max(n // 2, 8) for n in self.nodes)
        else:
            ns = tuple(max((n - 1) // 2 + 1, 8) for n in self.nodes)
        return GridSpec(self.extents, ns, self.boundary, self.mask_cutoff)


@dataclass
class DiscreteGenerator:
    """Flux-form discretization, stored in the symmetrized basis.

    ``matrix`` is W^(1/2) G W^(-1/2) (sparse, exactly symmetric); ``weight``
    holds the node weights exp(-phi) * cell volume of the retained nodes.
    The kernel vector of ``-matrix`` is sqrt(weight) up to rounding.
    """

    matrix: sp.csr_matrix
    weight: np.ndarray
    grid: GridSpec
    keep: np.ndarray           # boolean mask over the full tensor grid
    asymmetry: float
    kernel_residual: float
    masked_nodes: int

    @property
    def size(self):
        return self.matrix.shape[0]

    def kernel_vector(self):
        v = np.sqrt(self.weight)
        return v / np.linalg.norm(v)


def _connected(n_nodes, rows, cols):
    g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_nodes, n_nodes))
    ncomp, _ = sp.csgraph.connected_components(g, directed=False)
    return ncomp


def assemble_generator(phi: Potential, grid: GridSpec) -> DiscreteGenerator:
    """Assemble the weighted finite-difference generator on the grid.

    Raises when masking the singular set disconnects the retained nodes:
    the gap of a disconnected domain is zero and the caller should grid a
    single component instead.
    """
    axes = grid.axes()
    hs = grid.spacings()
    shape = tuple(grid.nodes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = phi.eval_fn(pts)
    keep = np.isfinite(vals) & (vals < grid.mask_cutoff)
    n_total = pts.shape[0]
    if not np.any(keep):
        raise ValidationError("all-masked", "every node is masked")

    idx_full = -np.ones(n_total, dtype=np.int64)
    idx_full[keep] = np.arange(int(keep.sum()))
    n = int(keep.sum())
    w_node = np.exp(-vals[keep])

    rows, cols, data = [], [], []
    diag = np.zeros(n)
    lin = np.arange(n_total).reshape(shape)

    for ax in range(grid.dim):
        h = hs[ax]
        if grid.boundary == "periodic":
            left = lin
            right = np.roll(lin, -1, axis=ax)
        else:
            sl_l = [slice(None)] * grid.dim
            sl_r = [slice(None)] * grid.dim
            sl_l[ax] = slice(0, shape[ax] - 1)
            sl_r[ax] = slice(1, shape[ax])
            left = lin[tuple(sl_l)]
            right = lin[tuple(sl_r)]
        li = left.ravel()
        ri = right.ravel()
        ok = keep[li] & keep[ri]
        li, ri = li[ok], ri[ok]
        mid = 0.5 * (pts[li] + pts[ri])
        if grid.boundary == "periodic":
            # wrap-around face midpoint lives half a cell beyond the end
            wrap = ri < li
            if np.any(wrap):
                mid[wrap, ax] = pts[li][wrap, ax] + 0.5 * h
        wf = np.exp(-np.minimum(phi.eval_fn(mid), 700.0)) / (h * h)
        a, b = idx_full[li], idx_full[ri]
        off = wf / np.sqrt(w_node[a] * w_node[b])
        rows.extend([a, b])
        cols.extend([b, a])
        data.extend([off, off])
        np.add.at(diag, a, -wf / w_node[a])
        np.add.at(diag, b, -wf / w_node[b])

    rows = np.concatenate([np.concatenate(rows), np.arange(n)])
    cols = np.concatenate([np.concatenate(cols), np.arange(n)])
    data = np.concatenate([np.concatenate(data), diag])
    mat = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    ncomp = _connected(n, rows, cols)
    if ncomp > 1:
        raise ValidationError(
            "disconnected",
            f"masking split the grid into {ncomp} components; "
            "grid one component at a time")

    asym = abs(mat - mat.T).max() if mat.nnz else 0.0
    scale = abs(mat).max() + 1e-300
    # kernel residual of the constant direction, relative to the row scale
    sqw = np.sqrt(w_node)
    kr = float(np.linalg.norm(mat @ sqw) / (scale * np.linalg.norm(sqw)))
    return DiscreteGenerator(matrix=mat, weight=w_node, grid=grid, keep=keep,
                             asymmetry=float(asym / scale),
                             kernel_residual=kr,
                             masked_nodes=int(n_total - n))


@dataclass(frozen=True)
class SpectralResult:
    """Gap estimate with grid-refinement history."""

    gap: float
    tolerance: float
    history: tuple            # ((n_total, gap), ...) coarse to fine
    extrapolated: float
    asymmetry: float
    kernel_residual: float
    residual: float           # eigenvector residual on the finest grid

    def as_dict(self):
        return {
            "gap": self.gap, "tolerance": self.tolerance,
            "history": [list(h) for h in self.history],
            "extrapolated": self.extrapolated,
            "asymmetry": self.asymmetry,
            "kernel_residual": self.kernel_residual,
            "residual": self.residual,
        }


def _smallest_deflated(op: DiscreteGenerator, tol=1e-10, seed=0):
    """Second-smallest eigenvalue of -G: iterative symmetric solve with the
    constant direction deflated, no factorization."""
    a = (-op.matrix).tocsr()
    n = a.shape[0]
    v0 = op.kernel_vector()
    rng = np.random.default_rng(seed)
    maxiter = max(10 * n, 2000)

    if n < 1200:
        dense = a.toarray()
        dense = dense + np.outer(v0, v0) * abs(dense).max() * 4.0
        vals, vecs = np.linalg.eigh(dense)
        lam = float(vals[0])
        vec = vecs[:, 0]
    else:
        x = rng.standard_normal((n, 2))
        x -= v0[:, None] * (v0 @ x)
        dinv = 1.0 / np.maximum(a.diagonal(), 1e-30)
        m = sp.diags(dinv)
        try:
            vals, vecs = spla.lobpcg(a, x, M=m, Y=v0[:, None], tol=tol,
                                     maxiter=maxiter, largest=False)
            order = np.argsort(vals)
            lam = float(vals[order[0]])
            vec = vecs[:, order[0]]
        except Exception as exc:  # pragma: no cover - fallback path
            raise EigenSolveError(f"eigensolver failed: {exc}") from exc

    vec = vec - v0 * (v0 @ vec)
    nv = np.linalg.norm(vec)
    if nv == 0:
        raise EigenSolveError("eigenvector collapsed onto the kernel")
    vec /= nv
    lam = float(vec @ (a @ vec))
    res = float(np.linalg.norm(a @ vec - lam * vec))
    if res > max(1e-6 * abs(a).max(), 1e3 * tol * max(abs(lam), 1.0)):
        raise EigenSolveError(f"eigen residual {res:.2e} above tolerance")
    return lam, res


def spectral_gap(phi: Potential, grid: GridSpec, refinements: int = 3,
                 tol: float = 1e-10, seed: int = 0) -> SpectralResult:
    """Gap of the discretized overdamped generator on a refinement ladder.

    ``grid`` is the finest level; two coarsenings are solved as well and the
    second-order Richardson extrapolation of the finest pair is reported.
    """
    grids = [grid]
    for _ in range(max(refinements, 2) - 1):
        grids.append(grids[-1].coarsen())
    grids = grids[::-1]

    history = []
    asym = kres = res = 0.0
    for g in grids:
        op = assemble_generator(phi, g)
        lam, res = _smallest_deflated(op, tol=tol, seed=seed)
        history.append((op.size, lam))
        asym = max(asym, op.asymmetry)
        kres = max(kres, op.kernel_residual)
    g1, g2 = history[-2][1], history[-1][1]
    extrap = g2 + (g2 - g1) / 3.0
    return SpectralResult(gap=history[-1][1], tolerance=tol,
                          history=tuple(history), extrapolated=extrap,
                          asymmetry=asym, kernel_residual=kres, residual=res)


# ---------------------------------------------------------------------------
# relative-boundedness constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KatoEstimate:
    """Constants bounding derivative sums by the overdamped generator.

    Kinetic model: four constants (a_hess, b_hess) and (a_drift, b_drift)
    for the Hessian-norm sum and the diagonal drift-gradient sum.  Sphere
    model: one combined pair (a_mixed, b_mixed).  ``status`` is "analytic"
    only for potential kinds with a proven closed form; family estimates
    are lower bounds on the best constants and are tagged as such.
    """

    model: str
    constants: dict
    family_size: int
    status: str  # "analytic" | "estimated-lower-bound"
    frontier: tuple = ()

    def as_dict(self):
        return {"model": self.model, "constants": dict(self.constants),
                "family_size": self.family_size, "status": self.status}

    def langevin_tuple(self):
        c = self.constants
        return (c["a_hess"], c["a_drift"], c["b_hess"], c["b_drift"])

    def fiber_tuple(self):
        c = self.constants
        return (c["a_mixed"], c["b_mixed"])


def _is_unit_quadratic(phi: Potential) -> bool:
    return (phi.kind == "quadratic"
            and np.allclose(phi.kernel_params[:-1], 0.5, rtol=0, atol=0))


def analytic_kato_constants(phi: Potential, model: str, d: int = 2) -> KatoEstimate:
    """Closed-form constants for the unit quadratic potential.

    In the Hermite (number-operator) basis the overdamped generator is
    diagonal, and operator inequalities give, for n position axes,
    sum ||d_i d_j f|| <= n ||G f|| and sum_i ||x_i d_i f|| <= 2 sqrt(n) ||G f||
    (sharp constants 1 and 2 in one dimension).  The sphere-model combined
    pair follows from the same calculus; it is a certified upper bound,
    not the minimal constant.
    """
    if not _is_unit_quadratic(phi):
        raise ValidationError("no-closed-form",
                              "analytic constants only for the unit quadratic")
    n = phi.dim
    if model == "langevin":
        consts = {"a_hess": float(n), "b_hess": 0.0,
                  "a_drift": 2.0 * math.sqrt(n), "b_drift": 0.0}
    else:
        consts = {"a_mixed": float(n) + 2.0 * n / (d - 1),
                  "b_mixed": 0.5 * n}
    return KatoEstimate(model=model, constants=consts, family_size=0,
                        status="analytic")


def _pair_for(lhs, g, nf):
    """Smallest (a, b) with lhs_k <= a g_k + b n_k on the family.

    Prefers the pure relative bound (b = 0); when some member has a
    negligible generator norm the pareto sweep of a + lam * b is used.
    """
    lhs = np.asarray(lhs)
    g = np.asarray(g)
    nf = np.asarray(nf)
    g_floor = 1e-12 * max(np.max(g), 1.0)
    if np.all(g > g_floor):
        a = float(np.max(lhs / g))
        return a, 0.0, ((a, 0.0),)
    from scipy.optimize import linprog
    frontier = []
    for lam in np.logspace(-3, 3, 13):
        r = linprog(c=[1.0, lam], A_ub=np.stack([-g, -nf], axis=1),
                    b_ub=-lhs, bounds=[(0, None), (0, None)], method="highs")
        if r.success:
            frontier.append((float(r.x[0]), float(r.x[1])))
    if not frontier:
        raise ValidationError("kato-infeasible", "no feasible constants found")
    a, b = min(frontier, key=lambda ab: ab[0] + ab[1])
    return a, b, tuple(frontier)


def estimate_kato_constants(phi: Potential, model: str,
                            family=None, quad: QuadratureScheme = None,
                            d: int = 2, x_nodes_per_axis=None,
                            prefer_analytic: bool = True) -> KatoEstimate:
    """Estimate the relative-boundedness constants on a test family.

    Family estimates certify lower bounds only: the true constants
    quantify over the full core, so a finite family can only push them up.
    For the unit quadratic the proven closed-form values are returned
    instead (``prefer_analytic``).
    """
    if prefer_analytic and _is_unit_quadratic(phi):
        return analytic_kato_constants(phi, model, d=d)
    if family is None:
        family = position_family(phi, n_members=24)
    if not family:
        raise ValidationError("empty-family", "need at least one test function")

    from .operators import gauss_legendre_box, gauss_hermite_position_rule
    if quad is not None:
        xn, xw = quad.x_nodes, quad.x_weights
    elif phi.kind == "quadratic":
        xn, xw = gauss_hermite_position_rule(
            phi.kernel_params[:-1], x_nodes_per_axis or 60)
    else:
        box = phi.default_box()
        xn, xw = gauss_legendre_box(box, x_nodes_per_axis or
                                    {1: 200, 2: 80, 3: 32}[phi.dim])
        xw = xw * np.exp(-np.minimum(phi.eval_fn(xn), 700.0))

    def _nrm(v):
        return math.sqrt(max(float(np.sum(xw * v * v)), 0.0))

    n = phi.dim
    gphi = phi.grad_fn(xn)
    hess_sum, drift_diag, drift_all, gen, base = [], [], [], [], []
    for f in family:
        hx = f.dxx(xn, None)
        dx = f.dx(xn, None)
        hess_sum.append(sum(_nrm(hx[:, i, j]) for i in range(n) for j in range(n)))
        drift_diag.append(sum(_nrm(gphi[:, i] * dx[:, i]) for i in range(n)))
        drift_all.append(sum(_nrm(gphi[:, i] * dx[:, j])
                             for i in range(n) for j in range(n)))
        lap = np.trace(hx, axis1=1, axis2=2)
        gen.append(_nrm(lap - np.sum(gphi * dx, axis=-1)))
        base.append(_nrm(f(xn, None)))

    if model == "langevin":
        a1, b1, fr1 = _pair_for(hess_sum, gen, base)
        a2, b2, fr2 = _pair_for(drift_diag, gen, base)
        consts = {"a_hess": a1, "b_hess": b1, "a_drift": a2, "b_drift": b2}
        frontier = fr1 + fr2
    else:
        mixed = [h + da / (d - 1) for h, da in zip(hess_sum, drift_all)]
        a1, b1, frontier = _pair_for(mixed, gen, base)
        consts = {"a_mixed": a1, "b_mixed": b1}
    return KatoEstimate(model=model, constants=consts, family_size=len(family),
                        status="estimated-lower-bound", frontier=frontier)


# ---------------------------------------------------------------------------
# sufficient criteria
# ---------------------------------------------------------------------------

def check_sufficient_criteria(phi: Potential, samples: np.ndarray,
                              threshold: float = math.inf,
                              gap: Optional[float] = None) -> dict:
    """Hessian-growth check: sup |hess phi| / (1 + |grad phi|) over samples.

    A finite supremum (together with a positive gap) certifies the
    regularity route to the rate constants; singular cores blow the ratio
    up and the report flags FAIL, directing such potentials to the
    relative-boundedness route instead.
    """
    if phi.hessian_fn is None:
        raise ValidationError("missing-hessian", "hessian required for this check")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    vals = phi.eval_fn(samples)
    ratios = np.full(samples.shape[0], np.inf)
    finite = np.isfinite(vals)
    if np.any(finite):
        h = phi.hessian_fn(samples[finite])
        g = phi.grad_fn(samples[finite])
        # scaled norms: entries near singular cores overflow naive squares
        spec = np.empty(h.shape[0])
        gn = np.empty(h.shape[0])
        for i, hh in enumerate(h):
            s = np.max(np.abs(hh))
            spec[i] = s * np.max(np.abs(np.linalg.eigvalsh(hh / s))) if s > 0 else 0.0
            gs = np.max(np.abs(g[i]))
            gn[i] = gs * math.sqrt(float(np.sum((g[i] / gs) ** 2))) if gs > 0 else 0.0
        with np.errstate(over="ignore"):
            ratios[finite] = spec / (1.0 + gn)
    c_hat = float(np.max(ratios))
    out = {"c_hat": c_hat, "samples": int(samples.shape[0]),
           "threshold": threshold, "pass": bool(np.isfinite(c_hat) and c_hat <= threshold)}
    if gap is not None:
        out["poincare_constant"] = gap
    return out
