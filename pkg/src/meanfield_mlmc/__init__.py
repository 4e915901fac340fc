"""Multilevel double-loop Monte Carlo with importance sampling for mean-field SDEs."""

from .adaptive import (
    ErrorBudget,
    MlmcReport,
    bias_estimate,
    extrapolate_variances,
    optimal_allocation,
    run_adaptive,
    single_level_run,
)
from .control import (
    ControlField,
    GridSpec,
    ValueGrid,
    control_from_value,
    load_control,
    offline_control,
    save_control,
    solve_kbe,
)
from .decoupled import PathOutcome, WienerPath, coupled_pair, simulate_decoupled_path
from .errors import DidNotConverge, EngineError, NonFiniteStateError, SolverError
from .estimators import (
    Hierarchy,
    LevelStats,
    dlmc,
    estimate_variances,
    level_difference_antithetic,
    level_difference_naive,
)
from .model import (
    ModelSpec,
    NormalLaw,
    Observable,
    PointLaw,
    UniformLaw,
    cos_observable,
    kuramoto_model,
    psi_observable,
)
from .particles import (
    EmpiricalLaw,
    ParticleInputs,
    RandomBlock,
    derive_seed,
    kernel_average,
    law_lookup,
    simulate_particle_system,
)

__version__ = "0.1.0"
