"""Interacting particle system simulation and the empirical law it produces.

The P-particle system is integrated with Euler-Maruyama on a uniform grid.
Randomness is counter-based (Philox): every outer Monte Carlo sample owns two
counter planes of one keyed stream family, one for its particle sub-streams
and one for the decoupled paths conditioned on its law.  Particle sub-stream
p is the p-th fixed-width row of the sample's raw uniform block, so its
draws (initial state, static coefficient, Wiener increments in time order)
depend only on (seed, outer index, p, step count): they are independent of
the total particle count and of evaluation order, which is what makes the
coarse/fine couplings well defined and parallel runs deterministic.

Coarse-level couplings never redraw: they restrict to a contiguous group of
sub-streams and block-sum the same increments onto the coarser grid (exact
partial sums of the same Brownian paths).
"""

from __future__ import annotations

import io
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtri

from .errors import NonFiniteStateError
from .model import ModelSpec

__all__ = [
    "RandomBlock",
    "ParticleInputs",
    "EmpiricalLaw",
    "derive_seed",
    "draw_particle_inputs",
    "integrate_particle_system",
    "simulate_particle_system",
    "kernel_average",
    "law_lookup",
]

# Counter-plane tags separating particle draws from decoupled-path draws.
_PLANE_PARTICLES = 1
_PLANE_PATHS = 2
_U_FLOOR = 2.0**-54  # keeps inverse-CDF transforms off the u = 0 singularity


def derive_seed(*keys: Union[int, str]) -> int:
    """Deterministically derive a child seed from integer or label key material."""
    ints = [
        zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF
        for k in keys
    ]
    ss = np.random.SeedSequence([0x5EED, *ints])
    return int(ss.generate_state(2, dtype=np.uint64)[0])


class StreamFamily:
    """All randomness of one estimator call, addressed by (outer index, plane).

    One Philox instance is re-seated per request: the counter's high words
    hold (outer index, plane tag), the low words count raw draws.  Requests
    with distinct (index, plane) therefore read disjoint, statistically
    independent counter ranges of the same keyed cipher.  Not thread-safe;
    each worker process builds its own family from the call seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = np.random.SeedSequence([0xFA417, self.seed]).generate_state(
            2, dtype=np.uint64
        )
        self._bitgen = np.random.Philox(key=self._key)
        self._gen = np.random.Generator(self._bitgen)

    def uniforms(self, outer_index: int, plane: int, shape) -> np.ndarray:
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array([0, 0, outer_index, plane], dtype=np.uint64),
                "key": self._key,
            },
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return self._gen.random(shape)


@dataclass(frozen=True)
class RandomBlock:
    """Handle to one outer sample's randomness: P sub-streams plus a path plane."""

    seed: int
    outer_index: int = 0

    def family(self) -> StreamFamily:
        return StreamFamily(self.seed)


@dataclass
class ParticleInputs:
    """Raw randomness for a particle-system integration (d = 1 layout).

    ``increments`` has shape (num_steps, P); row n holds the Wiener
    increments over [t_n, t_n + dt].  Sub-stream p is the column triple
    (x0[p], xi[p], increments[:, p]).
    """

    x0: np.ndarray
    xi: np.ndarray
    increments: np.ndarray
    dt: float

    @property
    def num_particles(self) -> int:
        return self.x0.shape[0]

    @property
    def num_steps(self) -> int:
        return self.increments.shape[0]

    def restrict(self, lo: int, hi: int) -> "ParticleInputs":
        """Inputs for the contiguous sub-stream group [lo, hi) only."""
        return ParticleInputs(
            x0=self.x0[lo:hi],
            xi=self.xi[lo:hi],
            increments=self.increments[:, lo:hi],
            dt=self.dt,
        )

    def coarsen_time(self, tau: int) -> "ParticleInputs":
        """Sum each block of tau consecutive increments; dt grows by tau."""
        n = self.num_steps
        if tau < 1 or n % tau != 0:
            raise ValueError(f"cannot coarsen {n} steps by factor {tau}")
        coarse = self.increments.reshape(n // tau, tau, -1).sum(axis=1)
        return ParticleInputs(x0=self.x0, xi=self.xi, increments=coarse, dt=self.dt * tau)


@dataclass
class EmpiricalLaw:
    """Particle trajectories on a uniform time grid, i.e. one law realization.

    ``states`` has shape (num_steps + 1, P); row n is the particle cloud at
    t_n = n * horizon / num_steps.  ``xi`` holds the per-particle static
    coefficients.  Per-slice kernel moments for separable kernels are cached
    on first use.
    """

    num_particles: int
    num_steps: int
    horizon: float
    states: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self._moments_k1: Optional[np.ndarray] = None

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.num_steps + 1)

    def kernel1_moments(self, model: ModelSpec) -> np.ndarray:
        """(num_steps+1, R) per-slice means of the separable g_r factors."""
        if model.kernel1_separable is None:
            raise ValueError("model kernel1 has no separable form")
        if self._moments_k1 is None:
            cols = [g(self.states).mean(axis=1) for _, g in model.kernel1_separable]
            self._moments_k1 = np.stack(cols, axis=1)
        return self._moments_k1

    def dump_csv(self, fh: io.TextIOBase) -> None:
        """Debug dump: one row per grid time, columns t, x_1..x_P."""
        fh.write("t," + ",".join(f"x_{p}" for p in range(self.num_particles)) + "\n")
        for t, row in zip(self.times, self.states):
            fh.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def law_lookup(law: EmpiricalLaw, n: int) -> np.ndarray:
    """The particle states at grid index n, as a view (no copy)."""
    if not 0 <= n <= law.num_steps:
        raise IndexError(f"step index {n} outside [0, {law.num_steps}]")
    return law.states[n]


def kernel_average(
    model: ModelSpec,
    which: str,
    x: np.ndarray,
    states: np.ndarray,
) -> np.ndarray:
    """(1/P) sum_j kernel(x, X_j) against one state slice, vectorized in x.

    ``which`` selects "k1" or "k2".  A separable k1 uses slice moments
    (single pass over the particles); otherwise the pairwise sum is formed
    directly.  A missing k2 is identically zero.
    """
    x = np.asarray(x, dtype=float)
    if which == "k2":
        if model.kernel2 is None:
            return np.zeros_like(x)
        return model.kernel2(x[..., None], states[None, :]).mean(axis=-1)
    if which != "k1":
        raise ValueError(f"unknown kernel selector {which!r}")
    if model.kernel1_separable is not None:
        out = np.zeros_like(x)
        for f, g in model.kernel1_separable:
            out += f(x) * g(states).mean()
        return out
    return model.kernel1(x[..., None], states[None, :]).mean(axis=-1)


def _particle_draws_batch(
    model: ModelSpec,
    family: StreamFamily,
    indices: Sequence[int],
    num_particles: int,
    num_steps: int,
    dt: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x0, xi, increments) for a batch of outer samples.

    Returns x0, xi with shape (B, P) and increments (N, B, P).  Sub-stream p
    occupies the p-th fixed-width row of each sample's uniform block, so the
    values never depend on how many particles or samples are drawn together.
    """
    width = 2 + num_steps
    u = np.empty((len(indices), num_particles, width))
    for b, i in enumerate(indices):
        u[b] = family.uniforms(int(i), _PLANE_PARTICLES, (num_particles, width))
    np.clip(u, _U_FLOOR, None, out=u)
    x0 = model.initial_law.quantile(u[:, :, 0])
    xi = model.coefficient_law.quantile(u[:, :, 1])
    increments = np.moveaxis(ndtri(u[:, :, 2:]), 2, 0) * np.sqrt(dt)
    return x0, xi, increments


def _path_draws_batch(
    model: ModelSpec,
    family: StreamFamily,
    indices: Sequence[int],
    num_paths: int,
    num_steps: int,
    dt: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x0, xi, increments) for the decoupled-path plane, shapes (B, M) / (N, B, M)."""
    width = 2 + num_steps
    u = np.empty((len(indices), num_paths, width))
    for b, i in enumerate(indices):
        u[b] = family.uniforms(int(i), _PLANE_PATHS, (num_paths, width))
    np.clip(u, _U_FLOOR, None, out=u)
    x0 = model.initial_law.quantile(u[:, :, 0])
    xi = model.coefficient_law.quantile(u[:, :, 1])
    increments = np.moveaxis(ndtri(u[:, :, 2:]), 2, 0) * np.sqrt(dt)
    return x0, xi, increments


def draw_particle_inputs(
    model: ModelSpec,
    block: RandomBlock,
    num_particles: int,
    num_steps: int,
    horizon: float,
) -> ParticleInputs:
    """Draw x0, xi and Wiener increments for each particle sub-stream."""
    if num_particles < 1 or num_steps < 1:
        raise ValueError("need at least one particle and one step")
    dt = horizon / num_steps
    x0, xi, inc = _particle_draws_batch(
        model, block.family(), [block.outer_index], num_particles, num_steps, dt
    )
    return ParticleInputs(x0=x0[0], xi=xi[0], increments=inc[:, 0, :], dt=dt)


def _kernel1_self_batch(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    """k1-average of each particle against its own cloud; x is (..., P)."""
    if model.kernel1_separable is not None:
        out = np.zeros_like(x)
        for f, g in model.kernel1_separable:
            out += f(x) * g(x).mean(axis=-1, keepdims=True)
        return out
    return model.kernel1(x[..., :, None], x[..., None, :]).mean(axis=-1)


def _kernel2_self_batch(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    if model.kernel2 is None:
        return np.zeros_like(x)
    return model.kernel2(x[..., :, None], x[..., None, :]).mean(axis=-1)


def _integrate_systems(
    model: ModelSpec,
    x0: np.ndarray,
    xi: np.ndarray,
    increments: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Euler-Maruyama for a batch of independent systems; returns (N+1, B, P)."""
    num_steps = increments.shape[0]
    states = np.empty((num_steps + 1, *x0.shape))
    states[0] = x0
    x = x0.copy()
    for n in range(num_steps):
        k1 = _kernel1_self_batch(model, x)
        k2 = _kernel2_self_batch(model, x)
        x = x + model.drift(x, k1, xi) * dt + model.diffusion(x, k2) * increments[n]
        if not np.all(np.isfinite(x)):
            flat = int(np.flatnonzero(~np.isfinite(x))[0])
            raise NonFiniteStateError(
                f"particle system diverged at step {n + 1}/{num_steps}, "
                f"particle {flat % x.shape[-1]}"
            )
        states[n + 1] = x
    return states


def integrate_particle_system(
    model: ModelSpec,
    inputs: ParticleInputs,
    horizon: float,
) -> EmpiricalLaw:
    """Integrate the interacting system from explicitly given inputs."""
    if model.dim != 1:
        raise NotImplementedError("particle simulation supports dim == 1 only")
    states = _integrate_systems(
        model, inputs.x0[None, :], inputs.xi[None, :], inputs.increments[:, None, :], inputs.dt
    )
    return EmpiricalLaw(
        num_particles=inputs.num_particles,
        num_steps=inputs.num_steps,
        horizon=horizon,
        states=states[:, 0, :],
        xi=inputs.xi.copy(),
    )


def simulate_particle_system(
    model: ModelSpec,
    num_particles: int,
    num_steps: int,
    horizon: float,
    block: RandomBlock,
) -> EmpiricalLaw:
    """Draw randomness from ``block`` and integrate the P-particle system."""
    inputs = draw_particle_inputs(model, block, num_particles, num_steps, horizon)
    return integrate_particle_system(model, inputs, horizon)
