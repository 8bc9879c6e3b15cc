"""Finite element solver for multidimensional linear fragmentation equations."""

from .errors import (
    DegenerateSequenceError,
    FragFemError,
    NonFiniteError,
    NumericalError,
    OutOfDomainError,
    ParseError,
    QuadratureConvergenceError,
    SingularMatrixError,
    ValidationError,
)
from .expressions import KernelExpression, parse_expression
from .mesh import DomainBox, GridSpec, Mesh, axis_panels, build_mesh, locate_point

__all__ = [
    "DegenerateSequenceError",
    "FragFemError",
    "NonFiniteError",
    "NumericalError",
    "OutOfDomainError",
    "ParseError",
    "QuadratureConvergenceError",
    "SingularMatrixError",
    "ValidationError",
    "KernelExpression",
    "parse_expression",
    "DomainBox",
    "GridSpec",
    "Mesh",
    "axis_panels",
    "build_mesh",
    "locate_point",
]

__version__ = "0.1.0"
