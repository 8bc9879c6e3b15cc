"""Selection functions, fragmentation kernels and bundled test problems.

A problem is ∂ₜu(x,t) = ∫ β(x|y) Γ(y) u(y,t) dy − Γ(x) u(x,t) on a
box 𝒟 = [lower, upper]^d, d in {2, 3}, with the gain integral taken
over y ∈ [x, upper] componentwise (truncation at the box, no tail
correction).

Kernels come in two flavors: smooth densities evaluated pointwise,
and the halving delta β = 2·∏ₖ δ(xₖ − yₖ/2) which is never sampled;
its gain contribution is the exact substitution
2·2^d·Γ(2x)·u(2x) for 2x inside 𝒟 and zero otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.special import exp1

from .errors import ValidationError
from .expressions import KernelExpression, parse_expression
from .fem_basis import QuadratureRule
from .mesh import DomainBox

_X_NAMES = ("x1", "x2", "x3")
_Y_NAMES = ("y1", "y2", "y3")


def _env_from_points(points, names, dim):
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    if points.shape[-1] != dim:
        raise ValidationError(f"expected points with {dim} components, "
                              f"got {points.shape[-1]}")
    return points, {names[k]: points[..., k] for k in range(dim)}


@dataclass(frozen=True)
class SelectionFn:
    """Breakage rate Γ(x) ≥ 0 with an optional declared bound a₀."""

    expr: KernelExpression
    dim: int
    a0: Optional[float] = None

    def __post_init__(self):
        extra = self.expr.free_identifiers() - set(_X_NAMES[: self.dim])
        if extra:
            raise ValidationError(
                f"selection function may only use {_X_NAMES[:self.dim]}, "
                f"found {sorted(extra)}")

    def __call__(self, points):
        points, env = _env_from_points(points, _X_NAMES, self.dim)
        vals = self.expr.evaluate(env)
        return np.broadcast_to(np.asarray(vals, dtype=float),
                               points.shape[:-1]).copy()

    def on_y(self) -> KernelExpression:
        """Same expression written in y₁..y_d (for gain integrands)."""
        return self.expr.subs({_X_NAMES[k]: _Y_NAMES[k] for k in range(self.dim)})


SMOOTH = "smooth"
HALVING_DELTA = "halving_delta"


@dataclass(frozen=True)
class FragmentationKernel:
    """Daughter distribution β(x|y).

    ``smooth`` kernels carry an expression in x and y and evaluate to 0
    whenever any fragment component exceeds its parent (no oversize
    fragments).  ``halving_delta`` has no pointwise values; it carries
    multiplicity 2 and the gain substitution rule.
    """

    kind: str
    dim: int
    expr: Optional[KernelExpression] = None

    def __post_init__(self):
        if self.kind not in (SMOOTH, HALVING_DELTA):
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.kind == SMOOTH:
            if self.expr is None:
                raise ValidationError("smooth kernel needs an expression")
            allowed = set(_X_NAMES[: self.dim]) | set(_Y_NAMES[: self.dim])
            extra = self.expr.free_identifiers() - allowed
            if extra:
                raise ValidationError(
                    f"kernel may only use {sorted(allowed)}, found {sorted(extra)}")
        elif self.expr is not None:
            raise ValidationError("halving delta kernel takes no expression")

    @property
    def is_delta(self) -> bool:
        return self.kind == HALVING_DELTA

    @property
    def multiplicity(self) -> float:
        """Number of daughters per event; exact only for the delta kernel."""
        if self.is_delta:
            return 2.0
        raise ValidationError("multiplicity of a smooth kernel is y-dependent; "
                              "use kernel_mass_check")

    def gain_substitution_factor(self) -> float:
        """Constant in gain(x) = factor·Γ(2x)·u(2x) for the delta kernel."""
        if not self.is_delta:
            raise ValidationError("substitution rule applies to delta kernels only")
        return 2.0 * 2.0 ** self.dim

    def __call__(self, x, y):
        """β(x|y); zero whenever any xₖ > yₖ.  Smooth kernels only."""
        if self.is_delta:
            raise ValidationError("delta kernels cannot be sampled pointwise")
        x, envx = _env_from_points(x, _X_NAMES, self.dim)
        y, envy = _env_from_points(y, _Y_NAMES, self.dim)
        vals = np.asarray(self.expr.evaluate({**envx, **envy}), dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        vals = np.broadcast_to(vals, shape).copy()
        oversize = np.any(np.broadcast_to(x, shape + (self.dim,))
                          > np.broadcast_to(y, shape + (self.dim,)), axis=-1)
        vals[oversize] = 0.0
        return vals


@dataclass(frozen=True)
class DiracIC:
    """Monodisperse initial condition δ(x − point)."""

    point: tuple

    @property
    def dim(self):
        return len(self.point)


@dataclass(frozen=True)
class FieldIC:
    """Smooth initial condition given by an expression in x."""

    expr: KernelExpression
    dim: int

    def __call__(self, points):
        points, env = _env_from_points(points, _X_NAMES, self.dim)
        vals = self.expr.evaluate(env)
        return np.broadcast_to(np.asarray(vals, dtype=float),
                               points.shape[:-1]).copy()


@dataclass(frozen=True)
class TestCase:
    """A fully specified fragmentation problem with reference data."""

    case_id: str
    dim: int
    gamma: SelectionFn
    beta: FragmentationKernel
    ic: object
    domain: DomainBox
    horizon: float
    exact_moments: Mapping[tuple, Callable[[float], float]] = field(default_factory=dict)
    exact_solution: Optional[KernelExpression] = None
    exact_gain: Optional[Callable] = None
    description: str = ""

    def exact_solution_at(self, points, t):
        if self.exact_solution is None:
            raise ValidationError(f"case {self.case_id} has no exact solution")
        points, env = _env_from_points(points, _X_NAMES, self.dim)
        env["t"] = t
        vals = self.exact_solution.evaluate(env)
        return np.broadcast_to(np.asarray(vals, dtype=float),
                               points.shape[:-1]).copy()


_PAPER_BOX_2D = DomainBox((1e-9, 1e-9), (2.0, 2.0))
_PAPER_BOX_3D = DomainBox((1e-9, 1e-9, 1e-9), (2.0, 2.0, 2.0))


def _product_moment_map(rate, orders):
    """Moments exp(rate(order)·t) for Dirac-at-ones initial data."""
    out = {}
    for order in orders:
        lam = rate(order)
        out[order] = (lambda t, lam=lam: math.exp(lam * t))
    return out


def _exp1_gain(prefactor_power, dim):
    """Truncated gain for Γ=1, β=c/∏yₖ against u=(1+t)^p·exp(−Σxₖ(1+t)).

    ∫_{a}^{2} e^{−cy}/y dy = E1(ac) − E1(2c), applied per axis.
    """
    c_kernel = 2.0

    def gain(points, t):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        c = 1.0 + t
        tail = exp1(2.0 * c)
        prod = np.ones(points.shape[0])
        for k in range(dim):
            prod *= exp1(points[:, k] * c) - tail
        return c_kernel * c ** prefactor_power * prod

    return gain


def _conv2_gain():
    """Truncated gain for Γ=1, β=4/(y₁y₂), u=(1+t)⁴/∏(1+(1+t)xₖ)³.

    ∫ dy/(y(1+cy)³) = ln(y/(1+cy)) + 1/(1+cy) + 1/(2(1+cy)²) by
    partial fractions with c = 1+t.
    """

    def antiderivative(y, c):
        w = 1.0 + c * y
        return np.log(y / w) + 1.0 / w + 0.5 / w ** 2

    def gain(points, t):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        c = 1.0 + t
        upper = antiderivative(2.0, c)
        prod = np.ones(points.shape[0])
        for k in range(2):
            prod *= upper - antiderivative(points[:, k], c)
        return 4.0 * c ** 4 * prod

    return gain


def _case_1():
    dim = 2
    orders = [(k, l) for k in range(4) for l in range(4)]
    moments = _product_moment_map(
        lambda o: 2.0 / ((o[0] + 1) * (o[1] + 1)) - 1.0, orders)
    return TestCase(
        case_id="1", dim=dim,
        gamma=SelectionFn(parse_expression("1"), dim, a0=1.0),
        beta=FragmentationKernel(SMOOTH, dim, parse_expression("2/(y1*y2)")),
        ic=DiracIC((1.0, 1.0)),
        domain=_PAPER_BOX_2D, horizon=1.0,
        exact_moments=moments,
        description="binary uniform kernel, constant selection",
    )


def _case_2():
    dim = 2
    return TestCase(
        case_id="2", dim=dim,
        gamma=SelectionFn(parse_expression("x1+x2"), dim, a0=4.0),
        beta=FragmentationKernel(SMOOTH, dim, parse_expression("2/(y1*y2)")),
        ic=DiracIC((1.0, 1.0)),
        domain=_PAPER_BOX_2D, horizon=3.0,
        exact_moments={(0, 0): lambda t: 1.0 + 2.0 * t,
                       (1, 0): lambda t: 1.0,
                       (0, 1): lambda t: 1.0},
        description="binary uniform kernel, additive selection",
    )


def _case_3():
    dim = 2
    orders = [(k, l) for k in range(4) for l in range(4)]
    moments = _product_moment_map(
        lambda o: 2.0 ** (1 - o[0] - o[1]) - 1.0, orders)
    return TestCase(
        case_id="3", dim=dim,
        gamma=SelectionFn(parse_expression("1"), dim, a0=1.0),
        beta=FragmentationKernel(HALVING_DELTA, dim),
        ic=DiracIC((1.0, 1.0)),
        domain=_PAPER_BOX_2D, horizon=3.0,
        exact_moments=moments,
        description="halving kernel, constant selection",
    )


def _case_4():
    dim = 2
    return TestCase(
        case_id="4", dim=dim,
        gamma=SelectionFn(parse_expression("x1+x2"), dim, a0=4.0),
        beta=FragmentationKernel(HALVING_DELTA, dim),
        ic=DiracIC((1.0, 1.0)),
        domain=_PAPER_BOX_2D, horizon=3.0,
        exact_moments={(0, 0): lambda t: 1.0 + 2.0 * t,
                       (1, 0): lambda t: 1.0,
                       (0, 1): lambda t: 1.0},
        description="halving kernel, additive selection",
    )


def _case_5():
    dim = 3
    return TestCase(
        case_id="5", dim=dim,
        gamma=SelectionFn(parse_expression("x1*x2*x3"), dim, a0=8.0),
        beta=FragmentationKernel(SMOOTH, dim, parse_expression("8/(y1*y2*y3)")),
        ic=DiracIC((1.0, 1.0, 1.0)),
        domain=_PAPER_BOX_3D, horizon=3.0,
        exact_moments={(0, 0, 0): lambda t: 1.0 + 7.0 * t,
                       (1, 1, 1): lambda t: 1.0},
        description="eightfold uniform kernel, product selection",
    )


def _conv_1():
    dim = 2
    return TestCase(
        case_id="conv1", dim=dim,
        gamma=SelectionFn(parse_expression("1"), dim, a0=1.0),
        beta=FragmentationKernel(SMOOTH, dim, parse_expression("2/(y1*y2)")),
        ic=FieldIC(parse_expression("exp(-(x1+x2))"), dim),
        domain=_PAPER_BOX_2D, horizon=1.0,
        exact_solution=parse_expression("(1+t)^3*exp(-(x1+x2)*(1+t))"),
        exact_gain=_exp1_gain(3, dim),
        description="smooth reference field, binary uniform kernel",
    )


def _conv_2():
    dim = 2
    return TestCase(
        case_id="conv2", dim=dim,
        gamma=SelectionFn(parse_expression("1"), dim, a0=1.0),
        beta=FragmentationKernel(SMOOTH, dim, parse_expression("4/(y1*y2)")),
        ic=FieldIC(parse_expression("1/((1+x1)^3*(1+x2)^3)"), dim),
        domain=_PAPER_BOX_2D, horizon=1.0,
        exact_solution=parse_expression(
            "(1+t)^4/((1+(1+t)*x1)^3*(1+(1+t)*x2)^3)"),
        exact_gain=_conv2_gain(),
        description="smooth rational field, fourfold uniform kernel",
    )


def _conv_3():
    dim = 3
    return TestCase(
        case_id="conv3", dim=dim,
        gamma=SelectionFn(parse_expression("1"), dim, a0=1.0),
        beta=FragmentationKernel(SMOOTH, dim, parse_expression("2/(y1*y2*y3)")),
        ic=FieldIC(parse_expression("exp(-(x1+x2+x3))"), dim),
        domain=_PAPER_BOX_3D, horizon=1.0,
        exact_solution=parse_expression("(1+t)^4*exp(-(x1+x2+x3)*(1+t))"),
        exact_gain=_exp1_gain(4, dim),
        description="smooth reference field, binary kernel in 3D",
    )


_CASES = {"1": _case_1, "2": _case_2, "3": _case_3, "4": _case_4,
          "5": _case_5, "conv1": _conv_1, "conv2": _conv_2, "conv3": _conv_3}


def bundled_test_case(case_id) -> TestCase:
    """Return one of the bundled problems (ids 1..5 and conv1..conv3)."""
    key = str(case_id)
    try:
        return _CASES[key]()
    except KeyError:
        raise ValidationError(
            f"unknown case {case_id!r}; available: {', '.join(sorted(_CASES))}"
        ) from None


def kernel_mass_check(beta: FragmentationKernel, y, quad: QuadratureRule):
    """Daughter count and mass ratio of β at parent size y.

    Returns (ν_num, mass_ratio) with ν_num ≈ ∫β dx over (0,y) and
    mass_ratio ≈ ∫(Σxₖ)β dx / Σyₖ.  A mass-conserving kernel has
    ratio 1; the delta kernel is handled symbolically.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != beta.dim:
        raise ValidationError(f"parent size must have {beta.dim} components")
    if np.any(y <= 0):
        raise ValidationError("parent size must be positive componentwise")
    if beta.is_delta:
        return 2.0, 1.0
    if quad.domain != "box" or quad.points.shape[1] != beta.dim:
        raise ValidationError("mass check needs a box rule of matching dimension")
    pts = quad.points * y
    wts = quad.weights * np.prod(y)
    vals = beta(pts, np.broadcast_to(y, pts.shape))
    nu_num = float(wts @ vals)
    mass = float(wts @ (vals * pts.sum(axis=1)))
    return nu_num, mass / float(y.sum())


def b0_estimate(gamma: SelectionFn, beta: FragmentationKernel,
                box: DomainBox, n: int = 32) -> float:
    """Lattice bound of β(x|y)·Γ(y), used for the Δt < 1/(4b₀) advisory.

    For the delta kernel the gain operator bound 2·2^(d/2)·max Γ on the
    reachable set {2x ∈ 𝒟} is returned instead, since β itself has no
    pointwise values.
    """
    dim = box.dim
    if beta.is_delta:
        axes = [np.linspace(2.0 * box.lower[k], box.upper[k], n)
                for k in range(dim)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
        gmax = float(np.max(gamma(grid)))
        return 2.0 * 2.0 ** (dim / 2.0) * gmax

    axes = [np.linspace(box.lower[k], box.upper[k], n) for k in range(dim)]
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    gamma_vals = gamma(lattice)
    best = 0.0
    # chunk over parents to keep the pair set small in memory
    chunk = max(1, int(2e6) // lattice.shape[0])
    for start in range(0, lattice.shape[0], chunk):
        ys = lattice[start:start + chunk]
        gv = gamma_vals[start:start + chunk]
        vals = beta(lattice[None, :, :], ys[:, None, :])  # (nchunk, nlattice)
        vals *= gv[:, None]
        # inf·0 at a degenerate corner (unbounded kernel, vanishing rate)
        # carries no information; an honest inf elsewhere survives and
        # makes the step-size advisory unsatisfiable, which is correct
        vals[np.isnan(vals)] = 0.0
        best = max(best, float(vals.max()))
    return best
