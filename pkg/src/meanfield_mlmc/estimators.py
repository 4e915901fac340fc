"""Double-loop Monte Carlo estimators and the coupled level-difference samplers.

One outer sample draws a fresh empirical law (or a fine law plus coupled
coarse laws for a level difference); the inner loop drives a batch of
controlled decoupled paths through it.  Sample means and variances of the
inner batches give the two variance components

    V1 = Var[ E[dG | laws] ],      V2 = E[ Var[dG | laws] ],

estimated as the sample variance of the inner means and the mean of the
Bessel-corrected inner variances.

Couplings at level l (fine resolution P_l = tau * P_{l-1}, N_l = tau * N_{l-1}):

* naive: one coarse law built from the first P_{l-1} particle sub-streams of
  the fine level, integrated at N_{l-1} steps on the block-summed increments
  of those same sub-streams;
* antithetic: tau coarse laws from the tau disjoint sub-stream groups, their
  inner observables averaged.

Inner paths always share x0, xi and the (block-summed) Wiener increments
between the fine path and every coarse path.

Work is reported in abstract cost units M1 * P^2 * N + M1 * M2 * P * N
(unit-cost kernel evaluations, Euler stepping), independent of how the
kernel sums are actually evaluated; wall-clock is tracked separately.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .control import ControlField
from .decoupled import integrate_paths_batch, law_moments_batch
from .model import ModelSpec, Observable
from .particles import (
    StreamFamily,
    _integrate_systems,
    _particle_draws_batch,
    _path_draws_batch,
)

__all__ = [
    "Hierarchy",
    "LevelStats",
    "variance_decomposition",
    "dlmc",
    "level_difference_antithetic",
    "level_difference_naive",
    "estimate_variances",
    "level_cost",
]

GAMMA_P = 1.0
GAMMA_N = 1.0


@dataclass(frozen=True)
class Hierarchy:
    """Geometric resolution ladder P_l = P0 tau^l, N_l = N0 tau^l."""

    base_particles: int = 5
    base_steps: int = 4
    tau: int = 2
    max_level: int = 12

    def __post_init__(self):
        if self.tau < 2:
            raise ValueError("tau must be an integer >= 2")
        if self.base_particles < 1 or self.base_steps < 1:
            raise ValueError("base sizes must be positive")

    def particles(self, level: int) -> int:
        return self.base_particles * self.tau**level

    def steps(self, level: int) -> int:
        return self.base_steps * self.tau**level


def level_cost(m1: int, m2: int, num_particles: int, num_steps: int) -> float:
    """Abstract work units: law simulations plus inner path simulations."""
    p, n = float(num_particles), float(num_steps)
    return m1 * p ** (1.0 + GAMMA_P) * n**GAMMA_N + m1 * m2 * p**GAMMA_P * n**GAMMA_N


@dataclass
class LevelStats:
    """Per-level record of a double-loop run."""

    level: int
    mean: float
    v1: float
    v2: float
    m1: int
    m2: int
    cost: float
    wall_time: float = 0.0
    variances_defined: bool = True
    mean_fine: float = 0.0
    mean_coarse: float = 0.0
    num_particles: int = 0
    num_steps: int = 0

    @property
    def mean_variance(self) -> float:
        """Estimator variance of the recorded mean: V1/M1 + V2/(M1 M2)."""
        return self.v1 / self.m1 + self.v2 / (self.m1 * self.m2)


def variance_decomposition(
    inner_means: np.ndarray, inner_vars: np.ndarray
) -> Tuple[float, float, float, bool]:
    """Combine per-law inner means and variances into (mean, V1, V2, defined)."""
    m1 = inner_means.shape[0]
    mean = float(inner_means.mean())
    if m1 < 2:
        return mean, 0.0, float(inner_vars.mean()), False
    v1 = float(inner_means.var(ddof=1))
    v2 = float(inner_vars.mean())
    return mean, v1, v2, True


@dataclass(frozen=True)
class _RunSpec:
    """Picklable description of one estimator run, shardable by outer index."""

    model: ModelSpec
    observable: Observable
    control: ControlField
    num_particles: int
    num_steps: int
    horizon: float
    m2: int
    seed: int
    sampler: Optional[str]  # None = single level, else "naive" | "antithetic"
    tau: int = 2


_BLOCK_TARGET_BYTES = 48 * 2**20
_BLOCK_MAX = 512


def _block_size(spec: "_RunSpec") -> int:
    """Outer samples integrated in lockstep; sized to bound peak memory.

    Blocking affects only efficiency, never values: every sample's draws are
    keyed by its own global index.
    """
    p, n, m2 = spec.num_particles, spec.num_steps, spec.m2
    per = 8.0 * (4.0 * p * (n + 3) + 6.0 * m2 * (n + 3))
    if spec.model.kernel1_separable is None:
        per += 8.0 * m2 * p
    return max(1, min(_BLOCK_MAX, int(_BLOCK_TARGET_BYTES / max(per, 1.0))))


def _outer_block(spec: "_RunSpec", family: StreamFamily, lo: int, hi: int) -> np.ndarray:
    """Outer samples [lo, hi) in one vectorized pass -> (hi-lo, 4) rows.

    Row columns: inner mean of dG, inner variance of dG, inner mean of the
    fine term, inner mean of the coarse surrogate.
    """
    model, observable, control = spec.model, spec.observable, spec.control
    indices = range(lo, hi)
    num_steps, m2 = spec.num_steps, spec.m2
    dt = spec.horizon / num_steps

    x0p, xip, incp = _particle_draws_batch(
        model, family, indices, spec.num_particles, num_steps, dt
    )
    states_fine = _integrate_systems(model, x0p, xip, incp, dt)
    moments_fine = law_moments_batch(model, states_fine)

    coarse_states = []
    if spec.sampler is not None:
        tau = spec.tau
        p_coarse = spec.num_particles // tau
        dt_coarse = dt * tau
        inc_coarse = incp.reshape(num_steps // tau, tau, *incp.shape[1:]).sum(axis=1)
        num_groups = tau if spec.sampler == "antithetic" else 1
        if spec.sampler not in ("antithetic", "naive"):
            raise ValueError(f"unknown sampler {spec.sampler!r}")
        for a in range(num_groups):
            sl = slice(a * p_coarse, (a + 1) * p_coarse)
            coarse_states.append(
                _integrate_systems(model, x0p[:, sl], xip[:, sl], inc_coarse[:, :, sl], dt_coarse)
            )

    x0b, xib, dwb = _path_draws_batch(model, family, indices, m2, num_steps, dt)
    terminal, likelihood, _ = integrate_paths_batch(
        model, states_fine, moments_fine, control, x0b, xib, dwb, dt
    )
    fine_vals = observable(terminal) * likelihood

    if coarse_states:
        dw_coarse = dwb.reshape(num_steps // spec.tau, spec.tau, *dwb.shape[1:]).sum(axis=1)
        acc = np.zeros_like(fine_vals)
        for states_c in coarse_states:
            terminal_c, likelihood_c, _ = integrate_paths_batch(
                model, states_c, law_moments_batch(model, states_c), control,
                x0b, xib, dw_coarse, dt * spec.tau,
            )
            acc += observable(terminal_c) * likelihood_c
        coarse_vals = acc / len(coarse_states)
        delta = fine_vals - coarse_vals
        coarse_mean = coarse_vals.mean(axis=1)
    else:
        delta = fine_vals
        coarse_mean = np.zeros(delta.shape[0])

    rows = np.empty((hi - lo, 4))
    rows[:, 0] = delta.mean(axis=1)
    rows[:, 1] = delta.var(axis=1, ddof=1) if m2 > 1 else 0.0
    rows[:, 2] = fine_vals.mean(axis=1)
    rows[:, 3] = coarse_mean
    return rows


def _run_chunk(args) -> np.ndarray:
    spec, lo, hi = args
    family = StreamFamily(spec.seed)
    block = _block_size(spec)
    out = np.empty((hi - lo, 4))
    for b_lo in range(lo, hi, block):
        b_hi = min(b_lo + block, hi)
        out[b_lo - lo : b_hi - lo] = _outer_block(spec, family, b_lo, b_hi)
    return out


def _run_estimator(spec: _RunSpec, level: int, m1: int, workers: int = 1) -> LevelStats:
    if m1 < 1 or spec.m2 < 1:
        raise ValueError("sample counts must be >= 1")
    start = time.perf_counter()
    if workers <= 1 or m1 < 2 * workers:
        rows = _run_chunk((spec, 0, m1))
    else:
        bounds = np.linspace(0, m1, workers + 1, dtype=int)
        tasks = [(spec, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = np.concatenate(list(pool.map(_run_chunk, tasks)), axis=0)
    mean, v1, v2, defined = variance_decomposition(rows[:, 0], rows[:, 1])
    if spec.m2 < 2:
        defined = False
        v2 = 0.0
    return LevelStats(
        level=level,
        mean=mean,
        v1=v1,
        v2=v2,
        m1=m1,
        m2=spec.m2,
        cost=level_cost(m1, spec.m2, spec.num_particles, spec.num_steps),
        wall_time=time.perf_counter() - start,
        variances_defined=defined,
        mean_fine=float(rows[:, 2].mean()),
        mean_coarse=float(rows[:, 3].mean()),
        num_particles=spec.num_particles,
        num_steps=spec.num_steps,
    )


def dlmc(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    num_particles: int,
    num_steps: int,
    horizon: float,
    m1: int,
    m2: int,
    seed: int,
    workers: int = 1,
    level: int = 0,
) -> LevelStats:
    """Plain double-loop estimator of E[G] at one resolution (no coupling).

    With the zero control this is the untilted estimator; otherwise every
    inner sample is reweighted by its Girsanov factor.
    """
    spec = _RunSpec(
        model=model,
        observable=observable,
        control=control,
        num_particles=num_particles,
        num_steps=num_steps,
        horizon=horizon,
        m2=m2,
        seed=seed,
        sampler=None,
    )
    return _run_estimator(spec, level, m1, workers)


def _level_difference(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    hierarchy: Hierarchy,
    level: int,
    m1: int,
    m2: int,
    horizon: float,
    seed: int,
    sampler: str,
    workers: int,
) -> LevelStats:
    if level < 1:
        raise ValueError("level differences need level >= 1")
    spec = _RunSpec(
        model=model,
        observable=observable,
        control=control,
        num_particles=hierarchy.particles(level),
        num_steps=hierarchy.steps(level),
        horizon=horizon,
        m2=m2,
        seed=seed,
        sampler=sampler,
        tau=hierarchy.tau,
    )
    return _run_estimator(spec, level, m1, workers)


def level_difference_antithetic(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    hierarchy: Hierarchy,
    level: int,
    m1: int,
    m2: int,
    horizon: float,
    seed: int,
    workers: int = 1,
) -> LevelStats:
    """Level-difference estimator with the group-averaged coarse surrogate.

    The fine level's particle sub-streams are split into tau disjoint groups;
    each group independently simulates a coarse law, and the coarse
    observable is the average over the tau groups.
    """
    return _level_difference(
        model, observable, control, hierarchy, level, m1, m2, horizon, seed,
        "antithetic", workers,
    )


def level_difference_naive(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    hierarchy: Hierarchy,
    level: int,
    m1: int,
    m2: int,
    horizon: float,
    seed: int,
    workers: int = 1,
) -> LevelStats:
    """Level-difference estimator whose coarse surrogate uses only the first group."""
    return _level_difference(
        model, observable, control, hierarchy, level, m1, m2, horizon, seed,
        "naive", workers,
    )


def estimate_variances(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    hierarchy: Hierarchy,
    level: int,
    m1: int,
    m2: int,
    horizon: float,
    seed: int,
    sampler: str = "antithetic",
    workers: int = 1,
) -> Tuple[float, float]:
    """(V1, V2) for the level-l difference (level 0: for G_0 itself)."""
    if m1 < 2 or m2 < 2:
        raise ValueError("variance estimation needs m1 >= 2 and m2 >= 2")
    if level == 0:
        stats = dlmc(
            model, observable, control,
            hierarchy.particles(0), hierarchy.steps(0), horizon,
            m1, m2, seed, workers,
        )
    else:
        stats = _level_difference(
            model, observable, control, hierarchy, level, m1, m2, horizon, seed,
            sampler, workers,
        )
    return stats.v1, stats.v2
