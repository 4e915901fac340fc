"""Backward PDE solve for the value function and the drift-tilt control field.

Given a frozen empirical law, the value function v solves the linear backward
equation

    dv/dt + b(x, k1-avg) dv/dx + (1/2) sigma(x, k2-avg)^2 d2v/dx2 = 0,
    v(T, x) = |G(x)|,

discretized with backward-Euler time stepping on the law's own time grid and
central differences in space (one tridiagonal solve per step, homogeneous
Neumann boundaries).  The variance-minimizing drift tilt is

    zeta(t, x) = sigma(x, k2-avg) * d/dx log v(t, x),

evaluated on the grid with v floored before the log, and interpolated
bilinearly in (t, x) everywhere else.  Accuracy requirements on zeta are mild:
a suboptimal control costs estimator variance, never bias.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import SolverError
from .model import ModelSpec, Observable
from .particles import EmpiricalLaw, RandomBlock, derive_seed, kernel_average, simulate_particle_system

__all__ = [
    "GridSpec",
    "ValueGrid",
    "ControlField",
    "default_grid",
    "solve_backward_pde",
    "solve_kbe",
    "control_from_value",
    "offline_control",
    "save_control",
    "load_control",
]

logger = logging.getLogger(__name__)

DEFAULT_NUM_CELLS = 2000
DEFAULT_OFFLINE_PARTICLES = 1000
DEFAULT_OFFLINE_STEPS = 100
FLOOR_SCALE = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Uniform spatial grid with num_cells intervals (num_cells + 1 nodes)."""

    x_min: float
    x_max: float
    num_cells: int = DEFAULT_NUM_CELLS

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError("empty spatial domain")
        if self.num_cells < 2:
            raise ValueError("need at least 2 cells")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.num_cells + 1)

    def halved(self) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, max(2, self.num_cells // 2))


def default_grid(observable: Observable, num_cells: int = DEFAULT_NUM_CELLS) -> GridSpec:
    """Domain wide enough that boundary reflection cannot reach the bulk."""
    upper = (observable.threshold if observable.threshold is not None else np.pi) + 4.0
    return GridSpec(-np.pi - 4.0, upper, num_cells)


@dataclass
class ValueGrid:
    """Value function samples v(t_n, x_j) on the law times x spatial nodes."""

    times: np.ndarray
    nodes: np.ndarray
    values: np.ndarray
    refinement_gap: Optional[float] = None


@dataclass
class ControlField:
    """Space-time control values with bilinear interpolation, edge-clamped in x.

    ``is_zero`` marks the exact no-tilt element: callers may skip likelihood
    accounting entirely, so the weight stays identically one.
    """

    times: np.ndarray
    nodes: np.ndarray
    values: np.ndarray
    is_zero: bool = False

    @classmethod
    def zero(cls, horizon: float = 1.0) -> "ControlField":
        return cls(
            times=np.array([0.0, horizon]),
            nodes=np.array([-1.0, 1.0]),
            values=np.zeros((2, 2)),
            is_zero=True,
        )

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_zero:
            return np.zeros_like(x)
        tt = self.times
        t = min(max(t, tt[0]), tt[-1])
        k = min(int(np.searchsorted(tt, t, side="right")) - 1, len(tt) - 2)
        k = max(k, 0)
        wt = (t - tt[k]) / (tt[k + 1] - tt[k])
        row = (1.0 - wt) * self.values[k] + wt * self.values[k + 1]
        return np.interp(x, self.nodes, row)


def solve_backward_pde(
    terminal: np.ndarray,
    times: np.ndarray,
    nodes: np.ndarray,
    drift_at,
    half_sq_diffusion_at,
) -> np.ndarray:
    """Backward-Euler / central-difference solve of the linear backward equation.

    ``drift_at(n)`` and ``half_sq_diffusion_at(n)`` return the coefficient
    arrays over the nodes for the step targeting time index n.  Returns the
    full (len(times), len(nodes)) array of values.  Constants are preserved
    exactly: every row of the implicit system sums to one.
    """
    num_nodes = nodes.shape[0]
    num_steps = times.shape[0] - 1
    dx = nodes[1] - nodes[0]
    out = np.empty((num_steps + 1, num_nodes))
    out[num_steps] = terminal
    ab = np.zeros((3, num_nodes))
    for n in range(num_steps - 1, -1, -1):
        dt = times[n + 1] - times[n]
        b = drift_at(n)
        a = half_sq_diffusion_at(n)
        conv = dt * b / (2.0 * dx)
        diff = dt * a / (dx * dx)
        # rows: ab[0]=upper, ab[1]=diag, ab[2]=lower (solve_banded layout)
        ab[1, :] = 1.0 + 2.0 * diff
        ab[0, 1:] = -(conv[:-1] + diff[:-1])
        ab[2, :-1] = conv[1:] - diff[1:]
        # Neumann ends: reflected ghost node, zero convection normal to wall
        ab[1, 0] = 1.0 + 2.0 * diff[0]
        ab[0, 1] = -2.0 * diff[0]
        ab[1, -1] = 1.0 + 2.0 * diff[-1]
        ab[2, -2] = -2.0 * diff[-1]
        sol = solve_banded((1, 1), ab, out[n + 1])
        if not np.all(np.isfinite(sol)):
            raise SolverError(f"backward solve produced non-finite values at step {n}")
        out[n] = sol
    return out


def _law_coefficients(model: ModelSpec, law: EmpiricalLaw, nodes: np.ndarray, xi_value: float):
    """Drift and half-squared-diffusion coefficient callbacks tied to the law."""

    def drift_at(n: int) -> np.ndarray:
        k1 = kernel_average(model, "k1", nodes, law.states[n])
        return model.drift(nodes, k1, xi_value)

    def half_sq_diffusion_at(n: int) -> np.ndarray:
        k2 = kernel_average(model, "k2", nodes, law.states[n])
        sig = model.diffusion(nodes, k2)
        return 0.5 * sig * sig

    return drift_at, half_sq_diffusion_at


def solve_kbe(
    model: ModelSpec,
    law: EmpiricalLaw,
    observable: Observable,
    grid: GridSpec,
    with_refinement_check: bool = False,
) -> ValueGrid:
    """Value function for the decoupled dynamics under the given law.

    The static coefficient entering the drift is fixed at the model's mean
    value; the per-path draw only perturbs the control's optimality, not the
    estimator's correctness.
    """
    if model.dim != 1:
        raise NotImplementedError("backward solver supports dim == 1 only")
    nodes = grid.nodes
    terminal = np.abs(observable(nodes))
    if float(terminal.max()) == 0.0:
        raise ValueError("|G| vanishes on the whole grid; value function is trivial")
    times = law.times
    drift_at, half_at = _law_coefficients(model, law, nodes, model.xi_mean)
    values = solve_backward_pde(terminal, times, nodes, drift_at, half_at)
    gap = None
    if with_refinement_check:
        coarse = solve_kbe(model, law, observable, grid.halved(), with_refinement_check=False)
        on_fine = np.interp(nodes, coarse.nodes, coarse.values[0])
        scale = float(np.abs(values[0]).max())
        gap = float(np.abs(values[0] - on_fine).max() / scale) if scale > 0 else 0.0
        if gap > 1e-3:
            logger.warning("grid self-check: J vs J/2 disagreement %.3e", gap)
    return ValueGrid(times=times, nodes=nodes, values=values, refinement_gap=gap)


def control_from_value(
    model: ModelSpec,
    law: EmpiricalLaw,
    values: ValueGrid,
    floor: float,
) -> ControlField:
    """sigma * d/dx log(max(v, floor)) on the value grid.

    Central differences inside, one-sided at the edges; the floor bounds the
    log-gradient wherever v collapses to zero.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    if not np.all(np.isfinite(values.values)):
        raise SolverError("value grid contains non-finite entries")
    nodes = values.nodes
    dx = nodes[1] - nodes[0]
    logv = np.log(np.maximum(values.values, floor))
    grad = np.gradient(logv, dx, axis=1)
    zeta = np.empty_like(grad)
    for n in range(values.times.shape[0]):
        k2 = kernel_average(model, "k2", nodes, law.states[n])
        zeta[n] = model.diffusion(nodes, k2) * grad[n]
    return ControlField(times=values.times.copy(), nodes=nodes.copy(), values=zeta)


def offline_control(
    model: ModelSpec,
    observable: Observable,
    num_particles: int = DEFAULT_OFFLINE_PARTICLES,
    num_steps: int = DEFAULT_OFFLINE_STEPS,
    horizon: float = 1.0,
    grid: Optional[GridSpec] = None,
    seed: int = 0,
    floor_scale: float = FLOOR_SCALE,
) -> ControlField:
    """One accurate law realization, one backward solve, one reusable control.

    The same field is applied at every resolution of the multilevel
    estimator; levels with other step counts read interpolated values.
    """
    if grid is None:
        grid = default_grid(observable)
    block = RandomBlock(derive_seed(seed, "offline-control"))
    law = simulate_particle_system(model, num_particles, num_steps, horizon, block)
    values = solve_kbe(model, law, observable, grid, with_refinement_check=True)
    floor = floor_scale * float(np.abs(observable(grid.nodes)).max())
    return control_from_value(model, law, values, floor)


_HEADER = "control-field v1"


def save_control(field: ControlField, path) -> None:
    """Flat text format: tagged header, grid line, then row-major values."""
    path = Path(path)
    num_steps = field.times.shape[0] - 1
    horizon = field.times[-1]
    with path.open("w") as fh:
        fh.write(f"# {_HEADER}\n")
        fh.write(
            f"{horizon:.17g} {num_steps} {field.nodes[0]:.17g} "
            f"{field.nodes[-1]:.17g} {field.nodes.shape[0] - 1}\n"
        )
        for row in field.values:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_control(path) -> ControlField:
    path = Path(path)
    with path.open() as fh:
        tag = fh.readline().strip()
        if tag != f"# {_HEADER}":
            raise ValueError(f"{path}: not a control-field file")
        horizon_s, nsteps_s, xmin_s, xmax_s, ncells_s = fh.readline().split()
        horizon, num_steps = float(horizon_s), int(nsteps_s)
        x_min, x_max, num_cells = float(xmin_s), float(xmax_s), int(ncells_s)
        values = np.loadtxt(fh, ndmin=2)
    if values.shape != (num_steps + 1, num_cells + 1):
        raise ValueError(f"{path}: value block shape {values.shape} does not match header")
    return ControlField(
        times=np.linspace(0.0, horizon, num_steps + 1),
        nodes=np.linspace(x_min, x_max, num_cells + 1),
        values=values,
        is_zero=bool(np.all(values == 0.0)),
    )
