"""Monte-Carlo ensemble harness.

Samples initial data from the stationary measure, advances independent
paths, accumulates running time averages and the Dyson martingale
f(X_t) - f(X_0) - int_0^t (generator f)(X_s) ds, and turns them into the
statistics the bound comparisons need: the ensemble RMS ergodic error with
a delta-method standard error, the martingale second moment, and moment
checks against the stationary law.

Time integrals use the trapezoid rule at integrator step resolution with
compensated summation (see the kernels); running averages are accumulated
on the centered observable, so a constant observable gives exactly zero
error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .core import (GibbsMeasure, ModelParams, Observable, PhasePoint,
                   Potential, ValidationError)
from .integrators import EnsembleState, IntegratorConfig, _advance

__all__ = [
    "SamplerSpec",
    "EnsembleConfig",
    "EnsembleRun",
    "EnsembleError",
    "InitialEnsemble",
    "sample_initial",
    "run_ensemble",
    "qv_check",
    "invariance_check",
    "microscopic_bound_check",
    "observable_stats",
]


class EnsembleError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    """Initial-law sampler: exact for Gaussian targets, otherwise a
    random-walk Metropolis chain targeting exp(-phi) with burn-in,
    thinning and acceptance-rate auto-scaling into [0.1, 0.7]."""

    kind: str = "auto"  # "auto" | "exact-gaussian" | "metropolis"
    burn_in: int = 2000
    proposal_scale: float = 1.0
    thinning: int = 10


@dataclass(frozen=True)
class EnsembleConfig:
    paths: int
    horizon: float
    checkpoints: tuple
    observable: Observable
    integrator: IntegratorConfig
    sampler: SamplerSpec = SamplerSpec()
    invalid_budget: float = 1e-3
    velocity_scale: float = 1.0  # deliberate mis-scaling knob for negative controls
    threads: int = 1

    def __post_init__(self):
        if self.paths < 2:
            raise ValidationError("paths", "need at least two paths")
        cps = tuple(float(t) for t in self.checkpoints)
        if any(b <= a for a, b in zip(cps, cps[1:])) or not cps:
            raise ValidationError("checkpoints", "checkpoints must strictly increase")
        if cps[-1] > self.horizon + 1e-12:
            raise ValidationError("checkpoints", "checkpoints exceed the horizon")
        object.__setattr__(self, "checkpoints", cps)


@dataclass
class InitialEnsemble:
    x: np.ndarray
    omega: np.ndarray
    diagnostics: dict

    def points(self, spherical=False):
        return [PhasePoint(x=self.x[i], omega=self.omega[i], spherical=spherical)
                for i in range(self.x.shape[0])]


def _metropolis_positions(phi: Potential, n: int, spec: SamplerSpec, rng):
    """Independent random-walk chains targeting exp(-phi), auto-scaled."""
    dim = phi.dim
    if phi.kind == "pair-lj-harmonic":
        a = phi.kernel_params[0]
        sg = phi.kernel_params[2]
        sd = 1.0 / math.sqrt(2.0 * a)
        x = rng.standard_normal((n, dim)) * sd
        # keep the two particles apart at the start
        x[:, 1] = x[:, 0] + np.where(x[:, 1] >= x[:, 0], 1.0, -1.0) * (
            sg + np.abs(x[:, 1] - x[:, 0]))
    else:
        box = phi.default_box()
        sd = np.array([(hi - lo) / 8.0 for lo, hi in box])
        x = rng.standard_normal((n, dim)) * sd
    v = phi.eval_fn(x)
    bad = ~np.isfinite(v)
    while np.any(bad):
        x[bad] += 0.1 * rng.standard_normal((int(bad.sum()), dim))
        v = phi.eval_fn(x)
        bad = ~np.isfinite(v)

    scale = spec.proposal_scale
    accepted = total = 0
    adapt_every = 100
    for sweep in range(spec.burn_in + spec.thinning):
        prop = x + scale * rng.standard_normal((n, dim))
        vp = phi.eval_fn(prop)
        logr = np.where(np.isfinite(vp), v - vp, -np.inf)
        take = np.log(rng.random(n)) < logr
        x[take] = prop[take]
        v[take] = vp[take]
        if sweep < spec.burn_in:
            accepted += int(take.sum())
            total += n
            if (sweep + 1) % adapt_every == 0:
                rate = accepted / total
                if rate < 0.1:
                    scale *= 0.5
                elif rate > 0.7:
                    scale *= 1.6
                accepted = total = 0
        else:
            accepted += int(take.sum())
            total += n
    rate = accepted / max(total, 1)
    if not (0.1 <= rate <= 0.7):
        raise EnsembleError(
            f"metropolis acceptance rate {rate:.3f} outside [0.1, 0.7] "
            "after auto-scaling")
    return x, {"acceptance_rate": rate, "proposal_scale": scale,
               "burn_in": spec.burn_in, "thinning": spec.thinning}


def sample_initial(measure: GibbsMeasure, n: int, spec: SamplerSpec,
                   seed: int, velocity_scale: float = 1.0) -> InitialEnsemble:
    """Draw n phase points from the stationary measure.

    Velocities are exact (Gaussian, or uniform on the sphere via
    normalized Gaussian vectors).  Positions are exact for quadratic
    potentials and Metropolis-sampled otherwise; sampled moments are
    compared against quadrature moments (dim <= 3) and a mismatch beyond
    5 standard errors is an error.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A5A5A]))
    p = measure.params
    phi = measure.potential
    diag: dict = {"sampler": "exact-gaussian"}

    kind = spec.kind
    if kind == "auto":
        kind = "exact-gaussian" if phi.kind == "quadratic" else "metropolis"
    if kind == "exact-gaussian" and phi.kind != "quadratic":
        raise ValidationError("sampler", "exact sampling needs a quadratic potential")

    if kind == "exact-gaussian":
        a = phi.kernel_params[:-1]
        x = rng.standard_normal((n, phi.dim)) / np.sqrt(2.0 * a)
    else:
        x, mh = _metropolis_positions(phi, n, spec, rng)
        diag = {"sampler": "metropolis", **mh}
        if phi.dim <= 3:
            mean, var = measure.position_moments()
            sm = x.mean(axis=0)
            sv = x.var(axis=0)
            se_m = np.sqrt(var / n)
            z = np.abs(sm - mean) / se_m
            diag["moment_z"] = z.tolist()
            if np.any(z > 5.0):
                raise EnsembleError(
                    f"sampled position means off by {z.max():.1f} standard errors")

    if p.model == "langevin":
        om = rng.standard_normal((n, p.velocity_dim)) / math.sqrt(p.beta)
        om *= velocity_scale
    else:
        if velocity_scale != 1.0:
            raise ValidationError("velocity-scale",
                                  "sphere velocities cannot be rescaled")
        g = rng.standard_normal((n, p.d))
        om = g / np.linalg.norm(g, axis=1, keepdims=True)
    return InitialEnsemble(x=x, omega=om, diagnostics=diag)


@dataclass
class EnsembleRun:
    """Per-checkpoint ensemble statistics (checkpoint 0 is time zero)."""

    t: np.ndarray                  # (m,), t[0] == 0
    avg_dev: np.ndarray            # (m, P) running average minus the mean, NaN at t=0
    martingale: np.ndarray         # (m, P)
    rms_error: np.ndarray          # (m,), NaN at t=0
    rms_se: np.ndarray
    snaps_x: np.ndarray            # (m, P, nx)
    snaps_om: np.ndarray
    alive: np.ndarray              # (m, P)
    invalid_paths: int
    refined_steps: int
    obs_mean: float
    obs_centered_l2: float
    mean_source: str
    config: EnsembleConfig = field(repr=False, default=None)

    @property
    def n_paths(self):
        return self.avg_dev.shape[1]


def observable_stats(obs: Observable, measure: GibbsMeasure):
    """(mean, centered L2 norm, provenance tag) of an observable."""
    if obs.known_mean is not None and obs.known_l2 is not None:
        c2 = obs.known_l2 ** 2 - obs.known_mean ** 2
        return obs.known_mean, math.sqrt(max(c2, 0.0)), "analytic"
    phi = measure.potential
    if phi.dim > 3:
        raise ValidationError("mean-unavailable",
                              "observable mean needs dim <= 3 quadrature "
                              "or known_mean")
    from .operators import build_quadrature
    q = build_quadrature(measure.params, phi)
    vals = obs.eval_fn(q.phase_x, q.phase_v)
    mean = float(np.sum(q.phase_w * vals))
    l2sq = float(np.sum(q.phase_w * vals * vals))
    return mean, math.sqrt(max(l2sq - mean * mean, 0.0)), "quadrature"


def _checkpoint_steps(cfg: EnsembleConfig):
    dt = cfg.integrator.dt
    steps = []
    for t in cfg.checkpoints:
        s = int(round(t / dt))
        if abs(s * dt - t) > 0.5 * dt:
            raise ValidationError("checkpoints",
                                  f"checkpoint {t} is not on the step grid")
        steps.append(max(s, 1))
    return steps


def run_ensemble(cfg: EnsembleConfig, params: ModelParams,
                 phi: Potential) -> EnsembleRun:
    """Advance the configured ensemble and assemble its statistics.

    Invalid paths (refinement budget exhausted) are excluded from every
    statistic and counted; exceeding the invalid-path budget is an error.
    """
    measure = GibbsMeasure(potential=phi, params=params)
    obs = cfg.observable
    mean, centered_l2, tag = observable_stats(obs, measure)

    init = sample_initial(measure, cfg.paths, cfg.sampler,
                          cfg.integrator.seed, cfg.velocity_scale)
    steps = _checkpoint_steps(cfg)

    if obs.code is not None:
        from .integrators import simulate_ensemble
        raw = simulate_ensemble(params, phi, cfg.integrator, init.x, init.omega,
                                steps, obs.code, mean, threads=cfg.threads)
    else:
        raw = _simulate_generic(params, phi, cfg.integrator, init.x, init.omega,
                                steps, obs, mean, cfg.threads)

    m = len(steps) + 1
    npaths = cfg.paths
    t = np.array([0.0] + [s * cfg.integrator.dt for s in steps])
    snaps_x = np.concatenate([init.x[None], raw["snaps_x"]], axis=0)
    snaps_om = np.concatenate([init.omega[None], raw["snaps_om"]], axis=0)
    alive = np.concatenate([np.ones((1, npaths), dtype=bool), raw["alive"]], axis=0)

    f0 = obs.eval_fn(init.x, init.omega)
    avg_dev = np.full((m, npaths), np.nan)
    mart = np.zeros((m, npaths))
    rms = np.full(m, np.nan)
    rms_se = np.full(m, np.nan)
    for k in range(1, m):
        avg_dev[k] = raw["d_int"][k - 1] / t[k]
        fk = obs.eval_fn(raw["snaps_x"][k - 1], raw["snaps_om"][k - 1])
        mart[k] = fk - f0 - raw["l_int"][k - 1]
        ok = alive[k]
        dev = avg_dev[k][ok]
        m2 = float(np.mean(dev ** 2))
        m4 = float(np.mean(dev ** 4))
        rms[k] = math.sqrt(m2)
        var_m2 = max(m4 - m2 * m2, 0.0) / ok.sum()
        rms_se[k] = math.sqrt(var_m2) / (2.0 * rms[k]) if rms[k] > 0 else 0.0

    invalid = int(npaths - raw["final_alive"].sum())
    if invalid > cfg.invalid_budget * npaths:
        raise EnsembleError(
            f"{invalid} invalid paths out of {npaths} exceeds the budget "
            f"{cfg.invalid_budget:.1%}")

    return EnsembleRun(
        t=t, avg_dev=avg_dev, martingale=mart, rms_error=rms, rms_se=rms_se,
        snaps_x=snaps_x, snaps_om=snaps_om, alive=alive,
        invalid_paths=invalid, refined_steps=int(raw["refined_steps"].sum()),
        obs_mean=mean, obs_centered_l2=centered_l2, mean_source=tag,
        config=cfg,
    )


def _simulate_generic(params, phi, icfg, x0, om0, checkpoint_steps, obs,
                      f_mean, threads):
    """Step-at-a-time driver for observables without a compiled code.

    The dynamics still run in the chunk kernels (one step per call); the
    observable and its generator image (when provided) are accumulated in
    the driver with compensated summation.
    """
    state = EnsembleState.fresh(x0, om0)
    n = x0.shape[0]
    m = len(checkpoint_steps)
    snaps_x = np.empty((m, n, x0.shape[1]))
    snaps_om = np.empty((m, n, om0.shape[1]))
    d_int = np.empty((m, n))
    l_int = np.empty((m, n))
    alive_at = np.empty((m, n), dtype=bool)

    dsum = np.zeros(n)
    dcomp = np.zeros(n)
    lsum = np.zeros(n)
    lcomp = np.zeros(n)
    f_prev = obs.eval_fn(state.x, state.omega) - f_mean
    l_prev = (obs.generator_eval(state.x, state.omega)
              if obs.generator_eval is not None else np.zeros(n))
    dt = icfg.dt
    k = 0
    total = checkpoint_steps[-1]
    for s in range(total):
        _advance(state, 1, icfg, params, phi, 0, 0, 0.0, threads=threads)
        f_new = obs.eval_fn(state.x, state.omega) - f_mean
        l_new = (obs.generator_eval(state.x, state.omega)
                 if obs.generator_eval is not None else np.zeros(n))
        K._kahan_add(dsum, dcomp, 0.5 * dt * (f_prev + f_new))
        K._kahan_add(lsum, lcomp, 0.5 * dt * (l_prev + l_new))
        f_prev, l_prev = f_new, l_new
        if s + 1 == checkpoint_steps[k]:
            snaps_x[k] = state.x
            snaps_om[k] = state.omega
            d_int[k] = dsum
            l_int[k] = lsum
            alive_at[k] = state.alive
            k += 1
    return {"snaps_x": snaps_x, "snaps_om": snaps_om, "d_int": d_int,
            "l_int": l_int, "alive": alive_at,
            "refined_steps": state.nref.copy(),
            "final_alive": state.alive.copy()}


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def qv_check(run: EnsembleRun, dissipation_form: float,
             rel_tol: float = 0.05, se_factor: float = 3.0):
    """Martingale second moment against -2 t (Sf, f).

    ``dissipation_form`` is (Sf, f) in the stationary L2 space, computed
    analytically or by quadrature.  Per checkpoint: ensemble mean of M_t^2,
    Monte-Carlo standard error, target, relative deviation, and a pass flag
    |sim - target| <= max(rel_tol * |target|, se_factor * SE).
    """
    rows = []
    for k in range(1, len(run.t)):
        ok = run.alive[k]
        msq = run.martingale[k][ok] ** 2
        sim = float(np.mean(msq))
        se = float(np.std(msq) / math.sqrt(ok.sum()))
        target = -2.0 * run.t[k] * dissipation_form
        dev = abs(sim - target)
        rel = dev / abs(target) if target != 0 else dev
        rows.append({
            "t": float(run.t[k]), "simulated": sim, "target": target,
            "std_error": se, "rel_deviation": rel,
            "pass": bool(dev <= max(rel_tol * abs(target), se_factor * se)),
        })
    return rows


def invariance_check(run: EnsembleRun, measure: GibbsMeasure,
                     z_max: float = 4.0):
    """First/second-moment checks of (x, omega) at every checkpoint.

    Flags any empirical moment more than ``z_max`` standard errors from
    the closed-form (or quadrature) value of the stationary measure.
    """
    xm, xv = measure.position_moments()
    vm, vv = measure.velocity_moments()
    spherical = measure.params.model == "fiber"
    rows = []
    for k in range(len(run.t)):
        ok = run.alive[k]
        n = int(ok.sum())
        worst = 0.0
        checks = {}
        xs = run.snaps_x[k][ok]
        oms = run.snaps_om[k][ok]
        for i in range(xs.shape[1]):
            se = math.sqrt(xv[i] / n)
            z = abs(xs[:, i].mean() - xm[i]) / se
            checks[f"x{i}_mean"] = z
            sq = xs[:, i] ** 2
            se2 = sq.std() / math.sqrt(n)
            z2 = abs(sq.mean() - (xv[i] + xm[i] ** 2)) / se2
            checks[f"x{i}_sq"] = z2
        for i in range(oms.shape[1]):
            se = math.sqrt(vv[i] / n)
            z = abs(oms[:, i].mean() - vm[i]) / se
            checks[f"om{i}_mean"] = z
            sq = oms[:, i] ** 2
            se2 = sq.std() / math.sqrt(n) + 1e-300
            z2 = abs(sq.mean() - vv[i]) / se2
            checks[f"om{i}_sq"] = z2
        if spherical:
            nrm = np.abs(np.linalg.norm(oms, axis=1) - 1.0).max()
            checks["sphere_norm"] = 0.0 if nrm <= 1e-12 else math.inf
        worst = max(checks.values())
        rows.append({"t": float(run.t[k]), "worst_z": worst,
                     "pass": bool(worst <= z_max),
                     "checks": {kk: float(z) for kk, z in checks.items()}})
    return rows


def microscopic_bound_check(run: EnsembleRun, micro_gap: float,
                            f_l2sq: float, se_factor: float = 3.0):
    """Mean-square running average against 2 ||f||^2 / (t * micro_gap).

    Valid for observables with zero velocity average (their running
    average is the centered one the run accumulates).
    """
    rows = []
    for k in range(1, len(run.t)):
        ok = run.alive[k]
        sq = run.avg_dev[k][ok] ** 2
        sim = float(np.mean(sq))
        se = float(np.std(sq) / math.sqrt(ok.sum()))
        bound = 2.0 * f_l2sq / (run.t[k] * micro_gap)
        rows.append({"t": float(run.t[k]), "simulated": sim, "bound": bound,
                     "std_error": se,
                     "pass": bool(sim <= bound + se_factor * se)})
    return rows
