"""Riemannian tensor-train completion on the quotient and embedded geometries."""

from . import bench, completion, embedded, io, quotient, solvers, tensor
from .completion import SampleSet
from .solvers import SOLVERS, SolverConfig, SolverTrace, solve
from .tensor import TTTensor

__all__ = [
    "bench",
    "completion",
    "embedded",
    "io",
    "quotient",
    "solvers",
    "tensor",
    "SampleSet",
    "SOLVERS",
    "SolverConfig",
    "SolverTrace",
    "TTTensor",
    "solve",
]

__version__ = "0.1.0"
