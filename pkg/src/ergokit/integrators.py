"""Time stepping for the two diffusion models.

Kinetic model: splitting scheme with an exact velocity refresh (default)
or Euler-Maruyama; sphere-velocity model: tangent predictor-corrector
consistent with the Stratonovich form (default) or an explicit
curvature-drift Euler variant for cross-validation.  Singular potentials
are handled by geometric substepping under a force cap; a path that
exhausts the refinement budget is flagged invalid, never silently dropped.

Noise is keyed by (seed, path, step, draw), so trajectories are
reproducible bit for bit for a fixed backend regardless of chunking or
thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .core import ModelParams, PhasePoint, Potential, ValidationError

__all__ = [
    "IntegratorConfig",
    "NoiseStream",
    "IntegrationError",
    "langevin_step",
    "fiber_step",
    "EnsembleState",
    "simulate_ensemble",
    "active_backend",
]

active_backend = K.active_backend


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    """Scheme selection and stepping controls.

    schemes: kinetic "baoab" (exact velocity refresh) or "euler";
    sphere "tangent-heun" (Stratonovich-consistent) or "tangent-ito"
    (explicit curvature drift, cross-validation only).
    """

    scheme: str = "baoab"
    dt: float = 1e-3
    seed: int = 0
    max_refinements: int = 20
    force_cap: Optional[float] = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt-positive", "dt must be positive")
        if self.max_refinements < 0:
            raise ValidationError("refinements", "max refinements must be >= 0")
        if self.scheme not in ("baoab", "euler", "tangent-heun", "tangent-ito"):
            raise ValidationError("scheme", f"unknown scheme {self.scheme!r}")

    @property
    def scheme_code(self) -> int:
        return 0 if self.scheme in ("baoab", "tangent-heun") else 1


@dataclass(frozen=True)
class NoiseStream:
    """Counter-keyed standard normals for one path.

    ``normal(step, draw)`` is a pure function of (seed, path, step, draw):
    bit-identical output for identical keys regardless of execution order
    or thread count.  ``increments`` scales by sqrt(dt) for Brownian use.
    """

    seed: int
    path: int = 0

    def normal(self, step: int, draw: int) -> float:
        return float(K.keyed_normals(self.seed, np.uint64(self.path),
                                     step, np.uint64(draw)))

    def normals(self, step: int, n: int) -> np.ndarray:
        return K.keyed_normals(self.seed, np.uint64(self.path), step,
                               np.arange(n, dtype=np.uint64))

    def increments(self, step: int, n: int, dt: float) -> np.ndarray:
        return math.sqrt(dt) * self.normals(step, n)


def _pot_kernel(phi: Potential):
    if phi.kernel_code is None:
        raise ValidationError(
            "kernel-potential",
            "this potential has no compiled form; use the library API with "
            "a coded potential kind (quadratic, pair-lj-harmonic, free)")
    return phi.kernel_code, np.ascontiguousarray(phi.kernel_params, dtype=float)


def _dispatch(model: str):
    backend = K.active_backend()
    if model == "langevin":
        return K.langevin_chunk if backend == "numba" else K.np_langevin_chunk
    return K.fiber_chunk if backend == "numba" else K.np_fiber_chunk


@dataclass
class EnsembleState:
    """Mutable batch state plus per-path accumulators."""

    x: np.ndarray
    omega: np.ndarray
    alive: np.ndarray
    dsum: np.ndarray       # trapezoid integral of f - f_mean
    dcomp: np.ndarray
    lsum: np.ndarray       # trapezoid integral of the generator image of f
    lcomp: np.ndarray
    nref: np.ndarray       # steps that needed substepping
    step: int = 0

    @staticmethod
    def fresh(x0, om0):
        n = x0.shape[0]
        return EnsembleState(
            x=np.array(x0, dtype=float, order="C", copy=True),
            omega=np.array(om0, dtype=float, order="C", copy=True),
            alive=np.ones(n, dtype=np.bool_),
            dsum=np.zeros(n), dcomp=np.zeros(n),
            lsum=np.zeros(n), lcomp=np.zeros(n),
            nref=np.zeros(n, dtype=np.int64),
        )


def _advance(state: EnsembleState, nsteps: int, cfg: IntegratorConfig,
             params: ModelParams, phi: Potential, obs_block: int,
             obs_idx: int, f_mean: float, path0: int = 0, threads: int = 1):
    code, par = _pot_kernel(phi)
    cap = -1.0 if cfg.force_cap is None else float(cfg.force_cap)
    fn = _dispatch(params.model)

    def run_block(lo, hi):
        args = (state.x[lo:hi], state.omega[lo:hi], state.alive[lo:hi],
                state.dsum[lo:hi], state.dcomp[lo:hi],
                state.lsum[lo:hi], state.lcomp[lo:hi], state.nref[lo:hi],
                state.step, nsteps, cfg.dt, cfg.seed, path0 + lo,
                code, par)
        if params.model == "langevin":
            fn(*args, params.alpha, params.beta, obs_block, obs_idx, f_mean,
               cap, cfg.max_refinements, cfg.scheme_code)
        else:
            fn(*args, params.sigma, params.d, obs_block, obs_idx, f_mean,
               cap, cfg.max_refinements, cfg.scheme_code)

    n = state.x.shape[0]
    if threads <= 1 or n < 2 * threads:
        run_block(0, n)
    else:
        # per-path keyed noise makes results independent of the split
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(run_block, lo, hi)
                    for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futs:
                f.result()
    state.step += nsteps


def simulate_ensemble(params: ModelParams, phi: Potential,
                      cfg: IntegratorConfig, x0, om0,
                      checkpoint_steps, obs_code, f_mean: float,
                      threads: int = 1):
    """Advance an ensemble, recording state and accumulators at checkpoints.

    ``checkpoint_steps`` are strictly increasing whole-step indices;
    ``obs_code`` is ("x"|"omega", index).  Returns a dict of arrays keyed
    by checkpoint: snapshots, centered time integrals, generator-image
    integrals, plus the per-path diagnostics.
    """
    block = 0 if obs_code[0] == "x" else 1
    idx = int(obs_code[1])
    state = EnsembleState.fresh(x0, om0)
    n = state.x.shape[0]
    m = len(checkpoint_steps)
    snaps_x = np.empty((m, n, state.x.shape[1]))
    snaps_om = np.empty((m, n, state.omega.shape[1]))
    d_int = np.empty((m, n))
    l_int = np.empty((m, n))
    alive_at = np.empty((m, n), dtype=bool)

    prev = 0
    for k, sk in enumerate(checkpoint_steps):
        if sk < prev:
            raise ValidationError("checkpoints", "checkpoint steps must increase")
        if sk > prev:
            _advance(state, sk - prev, cfg, params, phi, block, idx, f_mean,
                     threads=threads)
        prev = sk
        snaps_x[k] = state.x
        snaps_om[k] = state.omega
        d_int[k] = state.dsum
        l_int[k] = state.lsum
        alive_at[k] = state.alive

    return {
        "snaps_x": snaps_x, "snaps_om": snaps_om,
        "d_int": d_int, "l_int": l_int, "alive": alive_at,
        "refined_steps": state.nref.copy(),
        "final_alive": state.alive.copy(),
    }


# ---------------------------------------------------------------------------
# single-step public API
# ---------------------------------------------------------------------------

def langevin_step(point: PhasePoint, cfg: IntegratorConfig,
                  params: ModelParams, phi: Potential, noise: NoiseStream,
                  step_index: int = 0) -> PhasePoint:
    """One kinetic step of the configured scheme for a single state.

    Raises :class:`IntegrationError` when the refinement budget is
    exhausted (batch drivers flag and count instead).
    """
    if params.model != "langevin":
        raise ValidationError("model", "langevin_step needs the kinetic model")
    if not np.isfinite(phi.eval_fn(point.x[None, :]))[0]:
        raise ValidationError("domain", "starting point outside the domain")
    state = EnsembleState.fresh(point.x[None, :], point.omega[None, :])
    state.step = step_index
    cfg2 = IntegratorConfig(scheme=cfg.scheme, dt=cfg.dt, seed=noise.seed,
                            max_refinements=cfg.max_refinements,
                            force_cap=cfg.force_cap)
    _advance(state, 1, cfg2, params, phi, 0, 0, 0.0, path0=noise.path)
    if not state.alive[0]:
        raise IntegrationError("refinement cap exceeded; path invalid")
    return PhasePoint(x=state.x[0], omega=state.omega[0])


def fiber_step(point: PhasePoint, cfg: IntegratorConfig,
               params: ModelParams, phi: Potential, noise: NoiseStream,
               step_index: int = 0) -> PhasePoint:
    """One sphere-velocity step; output velocity is renormalized exactly."""
    if params.model != "fiber":
        raise ValidationError("model", "fiber_step needs the sphere model")
    nrm = float(np.linalg.norm(point.omega))
    if abs(nrm - 1.0) > 1e-9:
        raise ValidationError("sphere-constraint", "velocity must be unit length")
    state = EnsembleState.fresh(point.x[None, :], point.omega[None, :])
    state.step = step_index
    cfg2 = IntegratorConfig(scheme=cfg.scheme, dt=cfg.dt, seed=noise.seed,
                            max_refinements=cfg.max_refinements,
                            force_cap=cfg.force_cap)
    _advance(state, 1, cfg2, params, phi, 1, 0, 0.0, path0=noise.path)
    if not state.alive[0]:
        raise IntegrationError("velocity renormalization failed or cap exceeded")
    return PhasePoint(x=state.x[0], omega=state.omega[0], spherical=True)
