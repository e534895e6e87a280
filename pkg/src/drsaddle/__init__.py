"""Preconditioned Douglas-Rachford saddle-point solvers with relaxed and
dual-block-stochastic variants, plus problem builders and run tooling."""

from .spaces import BlockLayout, BlockVector, StateU
from .solvers import (
    ALGORITHMS,
    RelaxationSchedule,
    SamplingScheme,
    SaddleProblem,
    SolverConfig,
    run,
)
from .metrics import MetricRecorder, ReferencePoint, RunTrace

__version__ = "0.1.0"

__all__ = [
    "BlockLayout",
    "BlockVector",
    "StateU",
    "ALGORITHMS",
    "RelaxationSchedule",
    "SamplingScheme",
    "SaddleProblem",
    "SolverConfig",
    "run",
    "MetricRecorder",
    "ReferencePoint",
    "RunTrace",
    "__version__",
]
