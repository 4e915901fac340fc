"""Adaptive multilevel driver: level growth, sample allocation, error budget.

The driver grows the resolution ladder until the Richardson-extrapolated bias
fits inside its share of the tolerance, allocating inner/outer sample counts
per level from the variance components via the Lagrangian optimum

    M1_l ~ sqrt(V1_l / (P_l^2 N_l)) * S,   M1_l M2_l ~ sqrt(V2_l / (P_l N_l)) * S,

with S the shared normalization enforcing the statistical-error constraint.
Variances at depth are extrapolated geometrically instead of re-estimated,
and bias estimates are guarded against lucky cancellations by discounted
maxima over the preceding levels.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .control import ControlField
from .errors import DidNotConverge
from .estimators import (
    Hierarchy,
    LevelStats,
    dlmc,
    level_cost,
    level_difference_antithetic,
    level_difference_naive,
    estimate_variances,
)
from .model import ModelSpec, Observable
from .particles import derive_seed

__all__ = [
    "ErrorBudget",
    "MlmcReport",
    "optimal_allocation",
    "bias_estimate",
    "extrapolate_variances",
    "run_adaptive",
    "single_level_run",
]

DEFAULT_PILOT = (1000, 100)
DEFAULT_VARIANCE_COUNTS = (25, 1000)
DEFAULT_BIAS_FLOOR = (100, 50)
DEFAULT_RATES_ANTITHETIC = (1.0, 2.0, 2.0)
DEFAULT_RATES_NAIVE = (1.0, 1.0, 1.0)
_DIRECT_VARIANCE_MAX_LEVEL = 3  # deeper levels extrapolate instead of sampling


@dataclass(frozen=True)
class ErrorBudget:
    """Tolerance, bias/statistical split and confidence parameters.

    In relative mode every error bound scales with the running magnitude of
    the estimate; in absolute mode the scale is one (equivalent to freezing
    that magnitude at unity).
    """

    tol: float
    relative: bool = True
    theta: float = 0.5
    confidence: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence parameter must lie in (0, 1)")

    @property
    def quantile(self) -> float:
        """(1 - confidence/2) standard-normal quantile."""
        return NormalDist().inv_cdf(1.0 - self.confidence / 2.0)

    def scale(self, g_ref: float) -> float:
        return abs(g_ref) if self.relative else 1.0

    def bias_limit(self, g_ref: float) -> float:
        return self.theta * self.tol * self.scale(g_ref)

    def variance_limit(self, g_ref: float) -> float:
        return ((1.0 - self.theta) * self.tol * self.scale(g_ref) / self.quantile) ** 2


def optimal_allocation(
    levels: Sequence[Tuple[float, float, int, int]],
    budget: ErrorBudget,
    g_ref: float,
) -> List[Tuple[int, int]]:
    """Integer (M1, M2) per level from the ceiled continuous optimum.

    ``levels`` lists (V1, V2, P, N) per level.  All counts come back >= 1 and
    the plugged-in variance constraint holds by construction.
    """
    if budget.relative and g_ref == 0.0:
        raise ValueError("relative tolerance undefined for a zero reference value")
    limit = budget.variance_limit(g_ref)
    out = []
    for m1c, mtc in _continuous_pairs(levels, limit):
        m1 = max(1, math.ceil(m1c))
        m2 = max(1, math.ceil(mtc / m1))
        out.append((m1, m2))
    return out


def _continuous_pairs(
    levels: Sequence[Tuple[float, float, int, int]],
    variance_limit: float,
) -> List[Tuple[float, float]]:
    shared = 0.0
    for v1, v2, p, n in levels:
        if v1 < 0 or v2 < 0:
            raise ValueError("variance components must be nonnegative")
        shared += math.sqrt(float(p) * float(n)) * (math.sqrt(v1 * p) + math.sqrt(v2))
    out = []
    for v1, v2, p, n in levels:
        p, n = float(p), float(n)
        m1 = math.sqrt(v1 / (p * p * n)) * shared / variance_limit
        mt = math.sqrt(v2 / (p * n)) * shared / variance_limit
        out.append((m1, mt))
    return out


def bias_estimate(
    delta_mean_next: float,
    tau: int,
    alpha: float,
    history: Sequence[float] = (),
) -> float:
    """Richardson bias at level l from the (l+1)-difference mean.

    |E[G - G_l]| ~ |E[dG_{l+1}]| / (1 - tau^-alpha), guarded from below by
    the discounted bias estimates of up to two preceding levels.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    value = abs(delta_mean_next) / (1.0 - tau ** (-alpha))
    prior = list(history)[-2:]
    for back, h in enumerate(reversed(prior), start=1):
        value = max(value, h / tau ** (back * alpha))
    return value


def extrapolate_variances(
    v1_history: Sequence[float],
    v2_history: Sequence[float],
    tau: int,
    w: float,
    s: float,
    level: int,
) -> Tuple[float, float]:
    """Geometric continuation of (V1, V2) to a level too deep to sample."""
    if level <= _DIRECT_VARIANCE_MAX_LEVEL:
        raise ValueError(f"extrapolation reserved for levels > {_DIRECT_VARIANCE_MAX_LEVEL}")
    if len(v1_history) < 2 or len(v2_history) < 2:
        raise ValueError("need at least two preceding variance entries")
    v1 = max(v1_history[-1] / tau**w, v1_history[-2] / tau ** (2 * w))
    v2 = max(v2_history[-1] / tau**s, v2_history[-2] / tau ** (2 * s))
    return v1, v2


@dataclass
class MlmcReport:
    """Final estimate with its per-level breakdown and error budget."""

    estimate: float
    levels: List[LevelStats]
    num_levels: int
    bias: float
    stat_error: float
    total_cost: float
    sampling_cost: float
    wall_time: float
    rates: Tuple[float, float, float]
    g_ref: float
    tol: float
    relative: bool
    converged: bool
    iterations: List[dict] = field(default_factory=list)

    @property
    def variance_bound(self) -> float:
        """Plugged-in estimator variance Sum_l V1/M1 + V2/(M1 M2)."""
        return sum(st.mean_variance for st in self.levels)


def _sampler_fn(sampler: str):
    if sampler == "antithetic":
        return level_difference_antithetic
    if sampler == "naive":
        return level_difference_naive
    raise ValueError(f"unknown sampler {sampler!r}")


def run_adaptive(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    hierarchy: Hierarchy,
    budget: ErrorBudget,
    seed: int,
    horizon: float = 1.0,
    pilot: Tuple[int, int] = DEFAULT_PILOT,
    variance_counts: Tuple[int, int] = DEFAULT_VARIANCE_COUNTS,
    bias_floor: Tuple[int, int] = DEFAULT_BIAS_FLOOR,
    rates: Tuple[float, float, float] = DEFAULT_RATES_ANTITHETIC,
    sampler: str = "antithetic",
    workers: int = 1,
    log=None,
) -> MlmcReport:
    """Grow levels until the bias constraint holds; return the assembled report.

    Each adaptive iteration at depth L: estimate (V1, V2) at the new level
    (directly up to level 3, extrapolated beyond), allocate samples across
    levels 0..L, probe the (L+1)-difference to bound the bias, and re-sum the
    telescoping estimate from fresh draws at the allocated counts.  Raises
    DidNotConverge (with the partial report attached) at the level cap.
    """
    alpha, w_rate, s_rate = rates
    diff_fn = _sampler_fn(sampler)
    tau = hierarchy.tau
    emit = log if log is not None else (lambda msg: None)
    start = time.perf_counter()

    pilot_stats = dlmc(
        model, observable, control,
        hierarchy.particles(0), hierarchy.steps(0), horizon,
        pilot[0], pilot[1], derive_seed(seed, "pilot"), workers,
    )
    g_ref = pilot_stats.mean
    v1: Dict[int, float] = {0: pilot_stats.v1}
    v2: Dict[int, float] = {0: pilot_stats.v2}
    total_cost = pilot_stats.cost
    emit(
        f"pilot: level 0 mean={g_ref:.6e} V1={v1[0]:.3e} V2={v2[0]:.3e} "
        f"(M1={pilot[0]}, M2={pilot[1]})"
    )

    bias_history: List[float] = []
    iterations: List[dict] = []
    level_stats: List[LevelStats] = [pilot_stats]
    alloc: List[Tuple[int, int]] = []
    depth = 1
    while True:
        if depth > hierarchy.max_level:
            report = _assemble(
                g_ref, level_stats, depth - 1, bias_history, v1, v2, alloc,
                total_cost, start, rates, budget, iterations, converged=False,
            )
            raise DidNotConverge(
                f"bias constraint still violated at the level cap {hierarchy.max_level}",
                report=report,
            )
        if depth <= _DIRECT_VARIANCE_MAX_LEVEL:
            v1[depth], v2[depth] = estimate_variances(
                model, observable, control, hierarchy, depth,
                variance_counts[0], variance_counts[1], horizon,
                derive_seed(seed, "variance", depth), sampler, workers,
            )
            total_cost += level_cost(
                variance_counts[0], variance_counts[1],
                hierarchy.particles(depth), hierarchy.steps(depth),
            )
        else:
            v1[depth], v2[depth] = extrapolate_variances(
                [v1[depth - 2], v1[depth - 1]], [v2[depth - 2], v2[depth - 1]],
                tau, w_rate, s_rate, depth,
            )
        triples = [
            (v1[l], v2[l], hierarchy.particles(l), hierarchy.steps(l))
            for l in range(depth + 1)
        ]
        alloc = optimal_allocation(triples, budget, g_ref)

        # Bias probe at depth+1; allocation for that level does not exist yet,
        # so the depth-level allocation stands in, floored at the minimum counts.
        m1_hat = max(alloc[depth][0], bias_floor[0])
        m2_hat = max(alloc[depth][1], bias_floor[1])
        probe = diff_fn(
            model, observable, control, hierarchy, depth + 1,
            m1_hat, m2_hat, horizon, derive_seed(seed, "bias", depth), workers,
        )
        total_cost += probe.cost
        bias = bias_estimate(
            probe.mean, tau, alpha,
            bias_history if depth > 2 else (),
        )
        bias_history.append(bias)

        stats = [
            dlmc(
                model, observable, control,
                hierarchy.particles(0), hierarchy.steps(0), horizon,
                alloc[0][0], alloc[0][1],
                derive_seed(seed, "telescope", depth, 0), workers,
            )
        ]
        for l in range(1, depth + 1):
            stats.append(
                diff_fn(
                    model, observable, control, hierarchy, l,
                    alloc[l][0], alloc[l][1], horizon,
                    derive_seed(seed, "telescope", depth, l), workers,
                )
            )
        g_ref = sum(st.mean for st in stats)
        level_stats = stats
        total_cost += sum(st.cost for st in stats)

        limit = budget.bias_limit(g_ref)
        iterations.append(
            {
                "L": depth,
                "bias": bias,
                "bias_limit": limit,
                "estimate": g_ref,
                "allocation": list(alloc),
                "bias_probe_counts": (m1_hat, m2_hat),
            }
        )
        emit(
            f"L={depth}: bias={bias:.4e} limit={limit:.4e} estimate={g_ref:.6e} "
            f"alloc={alloc} probe=({m1_hat},{m2_hat})"
        )
        if bias <= limit:
            return _assemble(
                g_ref, level_stats, depth, bias_history, v1, v2, alloc,
                total_cost, start, rates, budget, iterations, converged=True,
            )
        depth += 1


def _assemble(
    g_ref, level_stats, depth, bias_history, v1, v2, alloc,
    total_cost, start, rates, budget, iterations, converged,
) -> MlmcReport:
    stat_error = budget.quantile * math.sqrt(
        sum(
            v1[l] / alloc[l][0] + v2[l] / (alloc[l][0] * alloc[l][1])
            for l in range(len(alloc))
        )
    ) if alloc else float("nan")
    return MlmcReport(
        estimate=g_ref,
        levels=level_stats,
        num_levels=depth,
        bias=bias_history[-1] if bias_history else 0.0,
        stat_error=stat_error,
        total_cost=total_cost,
        sampling_cost=sum(st.cost for st in level_stats),
        wall_time=time.perf_counter() - start,
        rates=rates,
        g_ref=g_ref,
        tol=budget.tol,
        relative=budget.relative,
        converged=converged,
        iterations=iterations,
    )


def single_level_run(
    model: ModelSpec,
    observable: Observable,
    control: ControlField,
    hierarchy: Hierarchy,
    budget: ErrorBudget,
    seed: int,
    horizon: float = 1.0,
    pilot: Tuple[int, int] = DEFAULT_PILOT,
    variance_counts: Tuple[int, int] = DEFAULT_VARIANCE_COUNTS,
    bias_floor: Tuple[int, int] = DEFAULT_BIAS_FLOOR,
    rates: Tuple[float, float, float] = DEFAULT_RATES_ANTITHETIC,
    workers: int = 1,
    log=None,
) -> MlmcReport:
    """Single-resolution baseline: bias rule picks (P, N), then one allocation.

    The resolution climbs the same ladder until the Richardson bias fits the
    budget; all sampling then happens at that single level with the one-term
    allocation optimum.
    """
    alpha = rates[0]
    emit = log if log is not None else (lambda msg: None)
    start = time.perf_counter()

    pilot_stats = dlmc(
        model, observable, control,
        hierarchy.particles(0), hierarchy.steps(0), horizon,
        pilot[0], pilot[1], derive_seed(seed, "sl-pilot"), workers,
    )
    g_ref = pilot_stats.mean
    total_cost = pilot_stats.cost
    bias_history: List[float] = []
    iterations: List[dict] = []

    depth = 0
    while True:
        probe = level_difference_antithetic(
            model, observable, control, hierarchy, depth + 1,
            bias_floor[0], bias_floor[1], horizon,
            derive_seed(seed, "sl-bias", depth), workers,
        )
        total_cost += probe.cost
        bias = bias_estimate(
            probe.mean, hierarchy.tau, alpha,
            bias_history if depth > 2 else (),
        )
        bias_history.append(bias)
        limit = budget.bias_limit(g_ref)
        iterations.append({"L": depth, "bias": bias, "bias_limit": limit})
        emit(f"single-level probe: L={depth} bias={bias:.4e} limit={limit:.4e}")
        if bias <= limit:
            break
        depth += 1
        if depth > hierarchy.max_level:
            raise DidNotConverge(
                f"single-level bias rule exhausted the level cap {hierarchy.max_level}",
                report=None,
            )

    p, n = hierarchy.particles(depth), hierarchy.steps(depth)
    var_stats = dlmc(
        model, observable, control, p, n, horizon,
        variance_counts[0], variance_counts[1],
        derive_seed(seed, "sl-variance", depth), workers,
    )
    total_cost += var_stats.cost
    g_ref = var_stats.mean if var_stats.mean != 0.0 or not budget.relative else g_ref
    alloc = optimal_allocation(
        [(var_stats.v1, var_stats.v2, p, n)], budget,
        g_ref if budget.relative else 1.0,
    )
    m1, m2 = alloc[0]
    final = dlmc(
        model, observable, control, p, n, horizon, m1, m2,
        derive_seed(seed, "sl-final", depth), workers,
    )
    total_cost += final.cost
    final.level = depth
    stat_error = budget.quantile * math.sqrt(
        var_stats.v1 / m1 + var_stats.v2 / (m1 * m2)
    )
    return MlmcReport(
        estimate=final.mean,
        levels=[final],
        num_levels=depth,
        bias=bias_history[-1],
        stat_error=stat_error,
        total_cost=total_cost,
        sampling_cost=final.cost,
        wall_time=time.perf_counter() - start,
        rates=rates,
        g_ref=final.mean,
        tol=budget.tol,
        relative=budget.relative,
        converged=True,
        iterations=iterations,
    )
