"""Controlled paths of the decoupled SDE under a frozen empirical law.

The decoupled process replaces the law dependence of the coefficients with a
fixed particle-cloud realization, turning the dynamics into an ordinary SDE
with random coefficients.  An optional drift tilt zeta is compensated by the
discrete Girsanov weight

    L = prod_n exp(-1/2 dt |zeta_n|^2 - zeta_n dW_n),

accumulated in log space and exponentiated once per path; under the zero
control no weight terms are formed and L is exactly one.

The core integrator is batched twice over: axis 0 enumerates independent
laws, axis 1 enumerates paths per law, so the level-difference estimators
integrate a whole outer block in lockstep.  The public functions wrap the
core for the one-law case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .control import ControlField
from .errors import NonFiniteStateError
from .model import ModelSpec
from .particles import EmpiricalLaw

__all__ = ["WienerPath", "PathOutcome", "simulate_decoupled_path", "coupled_pair"]


@dataclass
class WienerPath:
    """Wiener increments at a fixed resolution, shape (num_steps, batch).

    ``coarsen(tau)`` sums blocks of tau consecutive increments: the exact
    partial sums of the same Brownian motion on the coarser grid.
    """

    increments: np.ndarray
    dt: float

    @classmethod
    def draw(cls, rng: np.random.Generator, num_steps: int, dt: float, batch: int) -> "WienerPath":
        return cls(increments=rng.normal(0.0, np.sqrt(dt), (num_steps, batch)), dt=dt)

    @property
    def num_steps(self) -> int:
        return self.increments.shape[0]

    def coarsen(self, tau: int) -> "WienerPath":
        n = self.num_steps
        if tau < 1 or n % tau != 0:
            raise ValueError(f"cannot coarsen {n} steps by factor {tau}")
        if tau == 1:
            return self
        summed = self.increments.reshape(n // tau, tau, -1).sum(axis=1)
        return WienerPath(increments=summed, dt=self.dt * tau)


@dataclass
class PathOutcome:
    """Terminal states, Girsanov weights and control diagnostics for a batch."""

    terminal: np.ndarray
    likelihood: np.ndarray
    sup_abs_control: Optional[np.ndarray] = None


def law_moments_batch(model: ModelSpec, states: np.ndarray) -> Optional[np.ndarray]:
    """Separable-kernel slice moments for stacked laws: (N+1, B, P) -> (N+1, B, R)."""
    if model.kernel1_separable is None:
        return None
    cols = [g(states).mean(axis=-1) for _, g in model.kernel1_separable]
    return np.stack(cols, axis=-1)


def _kernel1_paths(
    model: ModelSpec,
    law_states_n: np.ndarray,
    moments_n: Optional[np.ndarray],
    x: np.ndarray,
) -> np.ndarray:
    """k1-average of path states x (B, M) against their laws' slice n."""
    if moments_n is not None:
        out = np.zeros_like(x)
        for r, (f, _) in enumerate(model.kernel1_separable):
            out += f(x) * moments_n[:, r, None]
        return out
    return model.kernel1(x[:, :, None], law_states_n[:, None, :]).mean(axis=-1)


def _kernel2_paths(model: ModelSpec, law_states_n: np.ndarray, x: np.ndarray) -> np.ndarray:
    if model.kernel2 is None:
        return np.zeros_like(x)
    return model.kernel2(x[:, :, None], law_states_n[:, None, :]).mean(axis=-1)


def integrate_paths_batch(
    model: ModelSpec,
    law_states: np.ndarray,
    moments: Optional[np.ndarray],
    control: ControlField,
    x0: np.ndarray,
    xi: np.ndarray,
    increments: np.ndarray,
    dt: float,
    want_sup_control: bool = False,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Euler-Maruyama for paths under stacked laws.

    ``law_states`` is (N+1, B, P), ``x0``/``xi`` are (B, M), ``increments``
    is (N, B, M); row b of every path array evolves under law b.  Returns
    (terminal, likelihood[, sup |zeta|]) with shape (B, M).
    """
    num_steps = increments.shape[0]
    x = np.broadcast_to(np.asarray(x0, dtype=float), increments.shape[1:]).copy()
    xi = np.broadcast_to(np.asarray(xi, dtype=float), x.shape)
    tilted = not control.is_zero
    log_weight = np.zeros_like(x) if tilted else None
    sup_z = np.zeros_like(x) if (tilted and want_sup_control) else None
    for n in range(num_steps):
        k1 = _kernel1_paths(model, law_states[n], None if moments is None else moments[n], x)
        k2 = _kernel2_paths(model, law_states[n], x)
        sig = model.diffusion(x, k2)
        drift = model.drift(x, k1, xi)
        dw = increments[n]
        if tilted:
            z = control(n * dt, x)
            drift = drift + sig * z
            log_weight -= 0.5 * dt * z * z + dw * z
            if sup_z is not None:
                np.maximum(sup_z, np.abs(z), out=sup_z)
        x = x + drift * dt + sig * dw
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.isfinite(x))[0])
            raise NonFiniteStateError(
                f"decoupled path diverged at step {n + 1}/{num_steps}, "
                f"path index {bad % x.shape[-1]}"
            )
    likelihood = np.exp(log_weight) if tilted else np.ones_like(x)
    return x, likelihood, sup_z


def simulate_decoupled_path(
    model: ModelSpec,
    law: EmpiricalLaw,
    control: ControlField,
    wiener: WienerPath,
    xi,
    x0,
) -> PathOutcome:
    """Controlled decoupled paths under one law; batch along the wiener axis.

    Requires the increment resolution to match the law's grid.  ``x0`` and
    ``xi`` may be scalars or arrays of the batch length.
    """
    if model.dim != 1:
        raise NotImplementedError("decoupled simulation supports dim == 1 only")
    if wiener.num_steps != law.num_steps:
        raise ValueError(
            f"wiener resolution {wiener.num_steps} does not match law steps {law.num_steps}"
        )
    batch = wiener.increments.shape[1]
    moments = (
        law.kernel1_moments(model)[:, None, :]
        if model.kernel1_separable is not None
        else None
    )
    terminal, likelihood, sup_z = integrate_paths_batch(
        model,
        law.states[:, None, :],
        moments,
        control,
        np.broadcast_to(np.asarray(x0, dtype=float), (1, batch)),
        np.broadcast_to(np.asarray(xi, dtype=float), (1, batch)),
        wiener.increments[:, None, :],
        law.dt,
        want_sup_control=True,
    )
    return PathOutcome(
        terminal=terminal[0],
        likelihood=likelihood[0],
        sup_abs_control=None if sup_z is None else sup_z[0],
    )


def coupled_pair(
    model: ModelSpec,
    law_fine: EmpiricalLaw,
    law_coarse: EmpiricalLaw,
    control: ControlField,
    wiener: WienerPath,
    xi,
    x0,
) -> Tuple[PathOutcome, PathOutcome]:
    """Fine and coarse controlled paths driven by the same Brownian motion.

    The fine path consumes the increments as given; the coarse path consumes
    their block sums.  Both share x0 and xi, and each accumulates its own
    likelihood at its own resolution.
    """
    if law_fine.horizon != law_coarse.horizon:
        raise ValueError("fine and coarse laws cover different horizons")
    if law_fine.num_steps % law_coarse.num_steps != 0:
        raise ValueError(
            f"fine steps {law_fine.num_steps} not a multiple of coarse steps {law_coarse.num_steps}"
        )
    tau = law_fine.num_steps // law_coarse.num_steps
    fine = simulate_decoupled_path(model, law_fine, control, wiener, xi, x0)
    coarse = simulate_decoupled_path(model, law_coarse, control, wiener.coarsen(tau), xi, x0)
    return fine, coarse
