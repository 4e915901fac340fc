"""Problem definitions: mean-field SDE coefficients and terminal observables.

A model is described by a drift b(x, k1, xi), a diffusion sigma(x, k2), two
pairwise interaction kernels k1(x, y) and k2(x, y) whose particle averages
feed the coefficients, an initial-state sampler and a per-path random
coefficient sampler.  The built-in instance is the fully connected Kuramoto
oscillator system

    dX_p = (xi_p + (1/P) sum_q sin(X_p - X_q)) dt + sigma dW_p,

with xi_p i.i.d. uniform and X_p(0) i.i.d. normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "ModelSpec",
    "Observable",
    "NormalLaw",
    "UniformLaw",
    "PointLaw",
    "kuramoto_model",
    "psi_observable",
    "cos_observable",
    "DEFAULT_SIGMA",
    "DEFAULT_X0_MEAN",
    "DEFAULT_X0_STD",
    "DEFAULT_XI_LOW",
    "DEFAULT_XI_HIGH",
]

# Experiment defaults for the Kuramoto instance.  The initial law is
# N(0, 0.2) with 0.2 read as the variance, so the sampler uses sqrt(0.2)
# as its standard deviation.
DEFAULT_SIGMA = 0.4
DEFAULT_X0_MEAN = 0.0
DEFAULT_X0_STD = math.sqrt(0.2)
DEFAULT_XI_LOW = -0.2
DEFAULT_XI_HIGH = 0.2


def _sin_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sin(x - y)


def _neg_sin(y: np.ndarray) -> np.ndarray:
    return -np.sin(y)


@dataclass(frozen=True)
class NormalLaw:
    """Scalar normal law, parameterized by standard deviation."""

    mean: float
    std: float

    def draw(self, rng: np.random.Generator, size=None):
        return rng.normal(self.mean, self.std, size)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        from scipy.special import ndtri

        return self.mean + self.std * ndtri(u)


@dataclass(frozen=True)
class UniformLaw:
    low: float
    high: float

    def draw(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.low, self.high, size)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        return self.low + (self.high - self.low) * np.asarray(u, dtype=float)


@dataclass(frozen=True)
class PointLaw:
    """Degenerate law at a single value; handy for deterministic checks."""

    value: float

    def draw(self, rng: np.random.Generator, size=None):
        return self.value if size is None else np.full(size, self.value)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(u, dtype=float), self.value)


@dataclass(frozen=True)
class _AffineDrift:
    """Drift of the form xi + k1-average; the Kuramoto form."""

    def __call__(self, x: np.ndarray, k1: np.ndarray, xi) -> np.ndarray:
        return xi + k1


@dataclass(frozen=True)
class _ConstantDiffusion:
    value: float

    def __call__(self, x: np.ndarray, k2) -> np.ndarray:
        return np.full_like(np.asarray(x, dtype=float), self.value)


@dataclass(frozen=True)
class ModelSpec:
    """One mean-field SDE problem instance.

    All coefficient callables are vectorized over numpy arrays and must be
    pure.  The kernels act pairwise; ``kernel2 = None`` means the k2-average
    is identically zero (constant diffusion models).  ``kernel1_separable``
    optionally lists (f, g) pairs with k1(x, y) = sum_r f_r(x) g_r(y), which
    lets averages against a particle cloud reuse per-slice moments instead of
    pairwise sums; the reordering is exact up to float rounding.

    ``initial_law`` and ``coefficient_law`` are distribution objects exposing
    both ``draw(rng, size)`` and ``quantile(u)`` (the samplers consume raw
    uniforms in the bulk path).  Only dim == 1 is supported by the bundled
    simulators and solvers.
    """

    dim: int
    drift: Callable
    diffusion: Callable
    kernel1: Callable
    kernel2: Optional[Callable]
    initial_law: object
    coefficient_law: object
    xi_mean: float = 0.0
    kernel1_separable: Optional[Tuple[Tuple[Callable, Callable], ...]] = None
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


def kuramoto_model(
    sigma: float = DEFAULT_SIGMA,
    x0_mean: float = DEFAULT_X0_MEAN,
    x0_std: float = DEFAULT_X0_STD,
    xi_low: float = DEFAULT_XI_LOW,
    xi_high: float = DEFAULT_XI_HIGH,
) -> ModelSpec:
    """Fully connected Kuramoto oscillator model.

    Drift xi + (1/P) sum_j sin(x - x_j), constant diffusion ``sigma``,
    x0 ~ N(x0_mean, x0_std^2), xi ~ U(xi_low, xi_high).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if xi_low > xi_high:
        raise ValueError(f"empty coefficient range [{xi_low}, {xi_high}]")
    return ModelSpec(
        dim=1,
        drift=_AffineDrift(),
        diffusion=_ConstantDiffusion(sigma),
        kernel1=_sin_kernel,
        kernel2=None,
        initial_law=NormalLaw(x0_mean, x0_std),
        coefficient_law=UniformLaw(xi_low, xi_high),
        xi_mean=0.5 * (xi_low + xi_high),
        kernel1_separable=((np.sin, np.cos), (np.cos, _neg_sin)),
        name="kuramoto",
    )


@dataclass(frozen=True)
class Observable:
    """Terminal observable G with an optional rare-event threshold."""

    fn: Callable[[np.ndarray], np.ndarray]
    name: str
    threshold: Optional[float] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(x)


@dataclass(frozen=True)
class _RampBeyond:
    """x -> clip(x - K + 1/2, 0, 1): 0 below K-1/2, 1 above K+1/2, linear between."""

    threshold: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float) - self.threshold + 0.5, 0.0, 1.0)


def psi_observable(threshold: float) -> Observable:
    """Lipschitz ramp observable for the rare event {X(T) near or above K}."""
    return Observable(
        fn=_RampBeyond(threshold),
        name=f"psi(x-{threshold:g})",
        threshold=threshold,
    )


def cos_observable() -> Observable:
    """Smooth, non-rare observable x -> cos(x)."""
    return Observable(fn=np.cos, name="cos")
