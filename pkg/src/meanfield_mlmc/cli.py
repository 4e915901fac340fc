"""Command-line front end: configuration, experiment suites, CSV emission.

Subcommands
-----------
solve-control   solve and save the importance-sampling control field
rates           level-difference decay rates (bias, V1, V2) with fitted slopes
is-experiments  variance-reduction experiments for the tilted estimator
adaptive        one adaptive multilevel run
adaptive-sweep  repeated adaptive runs over a tolerance ladder
baseline        single-level runs over the same ladder

Every command reads one JSON config (any field overridable on the command
line for seed/workers/outdir), echoes the effective config into the output
directory, and writes versioned CSV tables.  Identical config and seed give
identical CSV bytes at any worker count; wall-time columns are the only
nondeterministic ones and carry a ``_wall`` suffix.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adaptive import (
    ErrorBudget,
    MlmcReport,
    run_adaptive,
    single_level_run,
)
from .control import (
    ControlField,
    GridSpec,
    default_grid,
    load_control,
    offline_control,
    save_control,
    solve_kbe,
)
from .decoupled import integrate_paths_batch, law_moments_batch
from .errors import EngineError
from .estimators import (
    Hierarchy,
    LevelStats,
    dlmc,
    level_difference_antithetic,
    level_difference_naive,
)
from .model import (
    DEFAULT_SIGMA,
    DEFAULT_X0_MEAN,
    DEFAULT_X0_STD,
    DEFAULT_XI_HIGH,
    DEFAULT_XI_LOW,
    Observable,
    cos_observable,
    kuramoto_model,
    psi_observable,
)
from .particles import StreamFamily, derive_seed, _particle_draws_batch, _path_draws_batch
from .estimators import _RunSpec  # reused by experiment 1's conditional study

__all__ = ["RunConfig", "RateFit", "fit_rate", "main"]


@dataclass
class RunConfig:
    """Every knob of a run; defaults reproduce the oscillator study settings."""

    # model (Kuramoto instance)
    sigma: float = DEFAULT_SIGMA
    x0_mean: float = DEFAULT_X0_MEAN
    x0_std: float = DEFAULT_X0_STD
    xi_low: float = DEFAULT_XI_LOW
    xi_high: float = DEFAULT_XI_HIGH
    horizon: float = 1.0
    # observable
    observable: str = "psi"
    threshold: float = 2.5
    # hierarchy
    base_particles: int = 5
    base_steps: int = 4
    tau: int = 2
    max_level: int = 12
    # error budget: exactly one of tol_rel / tol_abs
    tol_rel: Optional[float] = 0.05
    tol_abs: Optional[float] = None
    theta: float = 0.5
    confidence: float = 0.05
    # sampler and decay-rate constants in force
    sampler: str = "antithetic"
    rate_alpha: float = 1.0
    rate_w: float = 2.0
    rate_s: float = 2.0
    # pilot / variance-estimation / bias-floor counts
    pilot_m1: int = 1000
    pilot_m2: int = 100
    variance_m1: int = 25
    variance_m2: int = 1000
    bias_floor_m1: int = 100
    bias_floor_m2: int = 50
    # control field: "solve", "zero", or a saved-field path
    control: str = "solve"
    control_particles: int = 1000
    control_steps: int = 100
    grid_x_min: Optional[float] = None
    grid_x_max: Optional[float] = None
    grid_cells: int = 2000
    control_floor_scale: float = 1e-12
    # harness
    seed: int = 1
    workers: int = 1
    outdir: str = "out"
    # rates command
    rate_levels: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    rates_var_m1: int = 100
    rates_var_m2: int = 10000
    rates_bias_m1: int = 1000
    rates_bias_m2: int = 1000
    # variance-reduction experiments
    exp1_control_particles: int = 200
    exp1_inner: List[int] = field(default_factory=lambda: [100, 1000, 10000, 100000])
    exp1_level: int = 3
    exp2_m1: int = 1000
    exp2_inner: List[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    # tolerance sweeps
    sweep_tolerances: List[float] = field(default_factory=list)
    sweep_runs: int = 20
    reference_tol: Optional[float] = None
    reference_seeds: int = 2

    def __post_init__(self):
        if (self.tol_rel is None) == (self.tol_abs is None):
            raise ValueError("exactly one of tol_rel / tol_abs must be set")
        if self.observable not in ("psi", "cos"):
            raise ValueError(f"unknown observable {self.observable!r}")
        if self.sampler not in ("antithetic", "naive"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        for name in (
            "pilot_m1", "pilot_m2", "variance_m1", "variance_m2",
            "bias_floor_m1", "bias_floor_m2", "workers",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_model(cfg: RunConfig):
    return kuramoto_model(cfg.sigma, cfg.x0_mean, cfg.x0_std, cfg.xi_low, cfg.xi_high)


def build_observable(cfg: RunConfig) -> Observable:
    if cfg.observable == "cos":
        return cos_observable()
    return psi_observable(cfg.threshold)


def build_hierarchy(cfg: RunConfig) -> Hierarchy:
    return Hierarchy(cfg.base_particles, cfg.base_steps, cfg.tau, cfg.max_level)


def build_budget(cfg: RunConfig) -> ErrorBudget:
    if cfg.tol_rel is not None:
        return ErrorBudget(cfg.tol_rel, relative=True, theta=cfg.theta, confidence=cfg.confidence)
    return ErrorBudget(cfg.tol_abs, relative=False, theta=cfg.theta, confidence=cfg.confidence)


def build_grid(cfg: RunConfig, observable: Observable) -> GridSpec:
    if cfg.grid_x_min is not None and cfg.grid_x_max is not None:
        return GridSpec(cfg.grid_x_min, cfg.grid_x_max, cfg.grid_cells)
    return default_grid(observable, cfg.grid_cells)


def resolve_control(cfg: RunConfig, model, observable: Observable) -> ControlField:
    """Zero field, freshly solved field, or a field loaded from disk."""
    if cfg.control == "zero":
        return ControlField.zero(cfg.horizon)
    if cfg.control == "solve":
        return offline_control(
            model, observable,
            num_particles=cfg.control_particles,
            num_steps=cfg.control_steps,
            horizon=cfg.horizon,
            grid=build_grid(cfg, observable),
            seed=cfg.seed,
            floor_scale=cfg.control_floor_scale,
        )
    return load_control(cfg.control)


@dataclass
class RateFit:
    """Least-squares fit of log_tau(value) against the level index."""

    levels: List[int]
    values: List[float]
    slope: float
    intercept: float
    max_residual: float

    @property
    def decay_rate(self) -> float:
        return -self.slope


def fit_rate(
    levels: Sequence[int],
    values: Sequence[float],
    tau: int,
    std_errors: Optional[Sequence[float]] = None,
) -> RateFit:
    """Fit value ~ C * tau^(slope * level) on the log scale.

    With standard errors supplied, points are weighted by the delta-method
    precision of log|value| (noisy shallow levels carry less leverage).
    Levels with nonpositive values are excluded.
    """
    levels = np.asarray(levels, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = np.abs(values) > 0
    if mask.sum() < 2:
        raise ValueError("need at least two positive values to fit a rate")
    x = levels[mask]
    y = np.log(np.abs(values[mask])) / np.log(tau)
    if std_errors is not None:
        rel = np.asarray(std_errors, dtype=float)[mask] / np.abs(values[mask])
        weights = 1.0 / np.maximum(rel, 1e-12)
    else:
        weights = None
    slope, intercept = np.polyfit(x, y, 1, w=weights)
    resid = y - (slope * x + intercept)
    return RateFit(
        levels=[int(l) for l in x],
        values=[float(v) for v in values[mask]],
        slope=float(slope),
        intercept=float(intercept),
        max_residual=float(np.abs(resid).max()),
    )


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path, schema: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])


def read_csv(path) -> Tuple[str, List[str], List[List[str]]]:
    with open(path) as fh:
        schema = fh.readline().strip().removeprefix("# schema=")
        reader = csv.reader(fh)
        header = next(reader)
        return schema, header, [row for row in reader]


def _echo_config(cfg: RunConfig, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.save(outdir / "config_effective.json")


# ----------------------------------------------------------------------
# solve-control


def cmd_solve_control(cfg: RunConfig) -> Path:
    outdir = Path(cfg.outdir)
    _echo_config(cfg, outdir)
    model = build_model(cfg)
    observable = build_observable(cfg)
    grid = build_grid(cfg, observable)
    field = offline_control(
        model, observable,
        num_particles=cfg.control_particles,
        num_steps=cfg.control_steps,
        horizon=cfg.horizon,
        grid=grid,
        seed=cfg.seed,
        floor_scale=cfg.control_floor_scale,
    )
    # grid diagnostics from a half-resolution re-solve of the same law
    values = solve_kbe(
        model,
        _control_law(cfg, model),
        observable,
        grid,
        with_refinement_check=True,
    )
    path = outdir / "control.txt"
    save_control(field, path)
    print(f"control field: {field.values.shape[0]} x {field.values.shape[1]} nodes")
    print(f"domain [{grid.x_min:.6g}, {grid.x_max:.6g}], cells {grid.num_cells}")
    print(f"|zeta| max {np.abs(field.values).max():.6g}")
    print(f"grid self-check (J vs J/2, rel) {values.refinement_gap:.3e}")
    print(f"saved {path}")
    return path


def _control_law(cfg: RunConfig, model):
    from .particles import RandomBlock, simulate_particle_system

    block = RandomBlock(derive_seed(cfg.seed, "offline-control"))
    return simulate_particle_system(
        model, cfg.control_particles, cfg.control_steps, cfg.horizon, block
    )


# ----------------------------------------------------------------------
# rates


def cmd_rates(cfg: RunConfig, samplers: Optional[Sequence[str]] = None) -> Path:
    """Per-level bias and variance decay tables with fitted rates."""
    outdir = Path(cfg.outdir)
    _echo_config(cfg, outdir)
    model = build_model(cfg)
    observable = build_observable(cfg)
    hierarchy = build_hierarchy(cfg)
    control = resolve_control(cfg, model, observable)
    samplers = list(samplers or ("antithetic", "naive"))
    rows = []
    fits = []
    for sampler in samplers:
        diff = level_difference_antithetic if sampler == "antithetic" else level_difference_naive
        var_stats: List[LevelStats] = []
        bias_stats: List[LevelStats] = []
        for lev in cfg.rate_levels:
            var_stats.append(
                diff(model, observable, control, hierarchy, lev,
                     cfg.rates_var_m1, cfg.rates_var_m2, cfg.horizon,
                     derive_seed(cfg.seed, "rates-var", sampler, lev), cfg.workers)
            )
            bias_stats.append(
                diff(model, observable, control, hierarchy, lev,
                     cfg.rates_bias_m1, cfg.rates_bias_m2, cfg.horizon,
                     derive_seed(cfg.seed, "rates-bias", sampler, lev), cfg.workers)
            )
        for lev, vs, bs in zip(cfg.rate_levels, var_stats, bias_stats):
            rows.append([
                sampler, lev, abs(bs.mean), math.sqrt(bs.mean_variance),
                vs.v1, vs.v2, bs.m1, bs.m2, vs.m1, vs.m2,
                vs.cost + bs.cost, vs.wall_time + bs.wall_time,
            ])
        alpha_fit = fit_rate(
            cfg.rate_levels, [abs(s.mean) for s in bias_stats], hierarchy.tau,
            std_errors=[math.sqrt(s.mean_variance) for s in bias_stats],
        )
        w_fit = fit_rate(cfg.rate_levels, [s.v1 for s in var_stats], hierarchy.tau)
        s_fit = fit_rate(cfg.rate_levels, [s.v2 for s in var_stats], hierarchy.tau)
        for quantity, f in (("bias", alpha_fit), ("v1", w_fit), ("v2", s_fit)):
            fits.append([sampler, quantity, f.decay_rate, f.slope, f.intercept, f.max_residual])
        print(
            f"{sampler}: alpha~={alpha_fit.decay_rate:.3f} "
            f"w~={w_fit.decay_rate:.3f} s~={s_fit.decay_rate:.3f}"
        )
    write_csv(
        outdir / "rates.csv", "rates.v1",
        ["sampler", "level", "abs_dg_mean", "dg_se", "v1", "v2",
         "m1_bias", "m2_bias", "m1_var", "m2_var", "cost", "time_wall"],
        rows,
    )
    write_csv(
        outdir / "rates_fit.csv", "rates_fit.v1",
        ["sampler", "quantity", "rate", "slope", "intercept", "max_residual"],
        fits,
    )
    return outdir / "rates.csv"


# ----------------------------------------------------------------------
# variance-reduction experiments


def _conditional_delta_samples(
    cfg: RunConfig, model, observable, hierarchy, control, num_paths: int
) -> np.ndarray:
    """dG samples at exp1_level for ONE outer law draw (shared across arms)."""
    from .decoupled import law_moments_batch
    from .particles import _integrate_systems

    level = cfg.exp1_level
    p, n = hierarchy.particles(level), hierarchy.steps(level)
    dt = cfg.horizon / n
    family = StreamFamily(derive_seed(cfg.seed, "exp1-outer"))
    x0p, xip, incp = _particle_draws_batch(model, family, [0], p, n, dt)
    states_f = _integrate_systems(model, x0p, xip, incp, dt)
    tau = hierarchy.tau
    pc = p // tau
    inc_c = incp.reshape(n // tau, tau, *incp.shape[1:]).sum(axis=1)
    coarse = [
        _integrate_systems(
            model, x0p[:, a * pc:(a + 1) * pc], xip[:, a * pc:(a + 1) * pc],
            inc_c[:, :, a * pc:(a + 1) * pc], dt * tau,
        )
        for a in range(tau)
    ]
    x0b, xib, dwb = _path_draws_batch(model, family, [0], num_paths, n, dt)
    term, lik, _ = integrate_paths_batch(
        model, states_f, law_moments_batch(model, states_f), control, x0b, xib, dwb, dt
    )
    fine_vals = observable(term) * lik
    dw_c = dwb.reshape(n // tau, tau, *dwb.shape[1:]).sum(axis=1)
    acc = np.zeros_like(fine_vals)
    for st in coarse:
        term_c, lik_c, _ = integrate_paths_batch(
            model, st, law_moments_batch(model, st), control, x0b, xib, dw_c, dt * tau
        )
        acc += observable(term_c) * lik_c
    return (fine_vals - acc / tau)[0]


def cmd_is_experiments(cfg: RunConfig) -> Path:
    """Squared coefficient of variation, with and without the drift tilt.

    Experiment 1: one outer law (M1 = 1), inner-count sweep, control solved
    from a smaller offline law.  Experiment 2: full level-difference
    estimator at M1 = exp2_m1, inner-count sweep, control from the default
    offline law.  Both arms of each experiment share all Monte Carlo draws.
    """
    outdir = Path(cfg.outdir)
    _echo_config(cfg, outdir)
    model = build_model(cfg)
    observable = build_observable(cfg)
    if observable.threshold is None:
        raise ValueError("variance-reduction experiments need the rare-event observable")
    hierarchy = build_hierarchy(cfg)
    zero = ControlField.zero(cfg.horizon)
    rows = []

    control1 = offline_control(
        model, observable,
        num_particles=cfg.exp1_control_particles,
        num_steps=cfg.control_steps,
        horizon=cfg.horizon,
        grid=build_grid(cfg, observable),
        seed=derive_seed(cfg.seed, "exp1-control"),
        floor_scale=cfg.control_floor_scale,
    )
    m_max = max(cfg.exp1_inner)
    arms = {
        "no_is": _conditional_delta_samples(cfg, model, observable, hierarchy, zero, m_max),
        "is": _conditional_delta_samples(cfg, model, observable, hierarchy, control1, m_max),
    }
    for m in cfg.exp1_inner:
        cov2 = {}
        for arm, samples in arms.items():
            head = samples[:m]
            mean = head.mean()
            var_est = head.var(ddof=1) / m if m > 1 else float("nan")
            cov2[arm] = var_est / mean**2 if mean != 0.0 else float("nan")
        ratio = cov2["no_is"] / cov2["is"] if cov2["is"] else float("nan")
        rows.append([1, m, cov2["no_is"], cov2["is"], ratio])

    control2 = offline_control(
        model, observable,
        num_particles=cfg.control_particles,
        num_steps=cfg.control_steps,
        horizon=cfg.horizon,
        grid=build_grid(cfg, observable),
        seed=derive_seed(cfg.seed, "exp2-control"),
        floor_scale=cfg.control_floor_scale,
    )
    for m2 in cfg.exp2_inner:
        cov2 = {}
        for arm, ctl in (("no_is", zero), ("is", control2)):
            st = level_difference_antithetic(
                model, observable, ctl, hierarchy, cfg.exp1_level,
                cfg.exp2_m1, m2, cfg.horizon,
                derive_seed(cfg.seed, "exp2", m2), cfg.workers,
            )
            cov2[arm] = st.mean_variance / st.mean**2 if st.mean != 0.0 else float("nan")
        ratio = cov2["no_is"] / cov2["is"] if cov2["is"] else float("nan")
        rows.append([2, m2, cov2["no_is"], cov2["is"], ratio])

    write_csv(
        outdir / "is_experiments.csv", "is_experiments.v1",
        ["experiment", "inner_samples", "cov2_no_is", "cov2_is", "ratio"],
        rows,
    )
    for row in rows:
        print(f"experiment {row[0]}: M={row[1]} cov2(no IS)={row[2]:.3e} "
              f"cov2(IS)={row[3]:.3e} ratio={row[4]:.1f}")
    return outdir / "is_experiments.csv"


# ----------------------------------------------------------------------
# adaptive runs and sweeps


def _report_rows(report: MlmcReport) -> List[List]:
    return [
        [st.level, st.mean, st.v1, st.v2, st.m1, st.m2, st.cost, st.wall_time]
        for st in report.levels
    ]


def _write_report(report: MlmcReport, outdir: Path, stem: str = "report") -> None:
    write_csv(
        outdir / f"{stem}.csv", "report.v1",
        ["level", "mean", "v1", "v2", "m1", "m2", "cost", "time_wall"],
        _report_rows(report),
    )
    write_csv(
        outdir / f"{stem}_log.csv", "adaptive_log.v1",
        ["iteration_L", "bias", "bias_limit", "estimate"],
        [[it["L"], it["bias"], it["bias_limit"], it["estimate"]] for it in report.iterations],
    )
    lines = [
        f"estimate        {report.estimate:.12g}",
        f"levels          {report.num_levels}",
        f"bias            {report.bias:.6g}",
        f"stat_error      {report.stat_error:.6g}",
        f"total_cost      {report.total_cost:.6g}",
        f"sampling_cost   {report.sampling_cost:.6g}",
        f"wall_time_s     {report.wall_time:.3f}",
        f"tolerance       {report.tol:.6g} ({'relative' if report.relative else 'absolute'})",
        f"converged       {report.converged}",
    ]
    (outdir / f"{stem}.txt").write_text("\n".join(lines) + "\n")


def cmd_adaptive(cfg: RunConfig) -> MlmcReport:
    outdir = Path(cfg.outdir)
    _echo_config(cfg, outdir)
    model = build_model(cfg)
    observable = build_observable(cfg)
    hierarchy = build_hierarchy(cfg)
    control = resolve_control(cfg, model, observable)
    budget = build_budget(cfg)
    log_path = outdir / "adaptive_run.log"
    with log_path.open("w") as fh:
        def emit(msg: str) -> None:
            fh.write(msg + "\n")
            print(msg)

        try:
            report = run_adaptive(
                model, observable, control, hierarchy, budget,
                seed=cfg.seed, horizon=cfg.horizon,
                pilot=(cfg.pilot_m1, cfg.pilot_m2),
                variance_counts=(cfg.variance_m1, cfg.variance_m2),
                bias_floor=(cfg.bias_floor_m1, cfg.bias_floor_m2),
                rates=(cfg.rate_alpha, cfg.rate_w, cfg.rate_s),
                sampler=cfg.sampler, workers=cfg.workers, log=emit,
            )
        except EngineError as exc:
            partial = getattr(exc, "report", None)
            if partial is not None:
                _write_report(partial, outdir)
            raise
    _write_report(report, outdir)
    print(f"estimate {report.estimate:.6e} (L={report.num_levels}, "
          f"bias {report.bias:.3e}, stat {report.stat_error:.3e}, "
          f"cost {report.total_cost:.4e})")
    return report


def _sweep(cfg: RunConfig, single_level: bool) -> Path:
    """Repeated seeded runs per tolerance plus one tight reference run."""
    outdir = Path(cfg.outdir)
    _echo_config(cfg, outdir)
    if not cfg.sweep_tolerances:
        raise ValueError("sweep_tolerances is empty")
    model = build_model(cfg)
    observable = build_observable(cfg)
    hierarchy = build_hierarchy(cfg)
    control = resolve_control(cfg, model, observable)
    estimator = "single" if single_level else "mlmc"

    def make_budget(tol: float) -> ErrorBudget:
        return ErrorBudget(
            tol, relative=cfg.tol_rel is not None,
            theta=cfg.theta, confidence=cfg.confidence,
        )

    ref_tol = cfg.reference_tol if cfg.reference_tol is not None else min(cfg.sweep_tolerances)
    references = []
    for k in range(cfg.reference_seeds):
        rep = run_adaptive(
            model, observable, control, hierarchy, make_budget(ref_tol),
            seed=derive_seed(cfg.seed, "reference", k), horizon=cfg.horizon,
            pilot=(cfg.pilot_m1, cfg.pilot_m2),
            variance_counts=(cfg.variance_m1, cfg.variance_m2),
            bias_floor=(cfg.bias_floor_m1, cfg.bias_floor_m2),
            rates=(cfg.rate_alpha, cfg.rate_w, cfg.rate_s),
            sampler=cfg.sampler, workers=cfg.workers,
        )
        references.append(rep)
        print(f"reference[{k}] @ tol {ref_tol:g}: {rep.estimate:.6e} "
              f"(stat {rep.stat_error:.2e})")
    reference = float(np.mean([r.estimate for r in references]))

    rows = []
    run_fn = single_level_run if single_level else run_adaptive
    for tol in cfg.sweep_tolerances:
        for rep_idx in range(cfg.sweep_runs):
            seed = derive_seed(cfg.seed, "sweep", estimator, rep_idx) + int(1e6 * tol)
            t0 = time.perf_counter()
            try:
                report = run_fn(
                    model, observable, control, hierarchy, make_budget(tol),
                    seed=seed, horizon=cfg.horizon,
                    pilot=(cfg.pilot_m1, cfg.pilot_m2),
                    variance_counts=(cfg.variance_m1, cfg.variance_m2),
                    bias_floor=(cfg.bias_floor_m1, cfg.bias_floor_m2),
                    rates=(cfg.rate_alpha, cfg.rate_w, cfg.rate_s),
                    workers=cfg.workers,
                    **({} if single_level else {"sampler": cfg.sampler}),
                )
                converged = report.converged
            except EngineError as exc:
                report = getattr(exc, "report", None)
                converged = False
                if report is None:
                    rows.append([estimator, tol, rep_idx, float("nan"), reference,
                                 float("nan"), -1, float("nan"),
                                 time.perf_counter() - t0, False])
                    continue
            err = abs(report.estimate - reference)
            rel_err = err / abs(reference) if reference != 0 else float("nan")
            rows.append([
                estimator, tol, rep_idx, report.estimate, reference, rel_err,
                report.num_levels, report.total_cost, report.wall_time, converged,
            ])
        done = [r for r in rows if r[1] == tol]
        mean_cost = float(np.mean([r[7] for r in done]))
        print(f"tol {tol:g}: mean cost {mean_cost:.4e} over {len(done)} runs")

    write_csv(
        outdir / "sweep.csv", "sweep.v1",
        ["estimator", "tolerance", "rep", "estimate", "reference", "rel_error",
         "levels", "cost", "time_wall", "converged"],
        rows,
    )
    tols = sorted(set(r[1] for r in rows))
    mean_costs = [float(np.mean([r[7] for r in rows if r[1] == t and np.isfinite(r[7])]))
                  for t in tols]
    if len(tols) >= 2:
        slope = float(np.polyfit(np.log(tols), np.log(mean_costs), 1)[0])
        print(f"cost-vs-tolerance log-log slope: {slope:.3f}")
        write_csv(
            outdir / "sweep_fit.csv", "sweep_fit.v1",
            ["estimator", "cost_slope", "reference", "reference_tol"],
            [[estimator, slope, reference, ref_tol]],
        )
    return outdir / "sweep.csv"


def cmd_adaptive_sweep(cfg: RunConfig) -> Path:
    return _sweep(cfg, single_level=False)


def cmd_single_level_baseline(cfg: RunConfig) -> Path:
    return _sweep(cfg, single_level=True)


# ----------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meanfield-mlmc",
        description="Multilevel double-loop Monte Carlo for mean-field SDEs",
    )
    parser.add_argument("--config", type=str, default=None, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--workers", type=int, default=None, help="override worker count")
    parser.add_argument("--out", type=str, default=None, help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve-control", help="solve and save the control field")
    rates = sub.add_parser("rates", help="level-difference decay rates")
    rates.add_argument("--sampler", choices=["antithetic", "naive", "both"], default="both")
    sub.add_parser("is-experiments", help="variance-reduction experiments")
    sub.add_parser("adaptive", help="one adaptive multilevel run")
    sub.add_parser("adaptive-sweep", help="adaptive runs over a tolerance ladder")
    sub.add_parser("baseline", help="single-level runs over a tolerance ladder")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        if args.out is not None:
            cfg.outdir = args.out
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "solve-control":
            cmd_solve_control(cfg)
        elif args.command == "rates":
            samplers = ("antithetic", "naive") if args.sampler == "both" else (args.sampler,)
            cmd_rates(cfg, samplers)
        elif args.command == "is-experiments":
            cmd_is_experiments(cfg)
        elif args.command == "adaptive":
            cmd_adaptive(cfg)
        elif args.command == "adaptive-sweep":
            cmd_adaptive_sweep(cfg)
        elif args.command == "baseline":
            cmd_single_level_baseline(cfg)
        else:  # pragma: no cover - argparse enforces choices
            return 1
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
