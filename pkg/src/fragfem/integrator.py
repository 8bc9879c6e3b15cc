"""Initial projection and the BDF1-bootstrapped BDF2 time stepper.

The stepping matrices are time-independent, so each run pays exactly
two dense LU factorizations (backward Euler for the first step, BDF2
for the rest) and back-substitutes from then on.  Both right-hand
sides are M-weighted histories; an optional load callback adds a
source vector evaluated at the new time level, which is how
manufactured solutions are driven.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .assembly import assemble_mass
from .errors import (NumericalError, OutOfDomainError, SingularMatrixError,
                     ValidationError)
from .fem_basis import simplex_quadrature
from .mesh import locate_points

DEFAULT_TAU = 0.01

#: Relative residual bound for verification solves.
RESIDUAL_TOL = 1e-10

_POLICIES = ("all", "last-two", "sampled")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time levels t_n = n·τ with τ = horizon/nsteps."""

    horizon: float
    nsteps: int

    def __post_init__(self):
        if not (self.horizon > 0.0):
            raise ValidationError("time horizon must be positive")
        if self.nsteps < 1:
            raise ValidationError("need at least one time step")

    @property
    def tau(self) -> float:
        return self.horizon / self.nsteps

    def time(self, n: int) -> float:
        return self.tau * n

    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.nsteps + 1)

    @classmethod
    def with_tau(cls, horizon, tau):
        """Grid with the step count rounded so nsteps·τ' = horizon."""
        n = max(1, int(round(horizon / tau)))
        return cls(horizon, n)


class StateTrajectory:
    """Stored coefficient vectors of a run.

    policy "all" keeps every level, "last-two" only the BDF2 history,
    "sampled" additionally keeps the levels listed in sample_indices.
    Every pushed state is checked finite; the offending step index is
    part of the error, which is how a blow-up is reported.
    """

    def __init__(self, ndofs, policy="sampled", sample_indices=()):
        if policy not in _POLICIES:
            raise ValidationError(f"unknown storage policy {policy!r}")
        self.ndofs = int(ndofs)
        self.policy = policy
        self.sample_indices = frozenset(int(i) for i in sample_indices)
        self.samples = []            # [(n, t, alpha)] in push order
        self._hist = []              # last two (n, t, alpha)

    def push(self, n, t, alpha):
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (self.ndofs,):
            raise ValidationError(
                f"state has {alpha.shape} entries, expected {self.ndofs}")
        if not np.isfinite(alpha).all():
            raise NumericalError(
                f"state became non-finite at step {n} (t = {t:g})")
        alpha = alpha.copy()
        self._hist.append((n, t, alpha))
        if len(self._hist) > 2:
            self._hist.pop(0)
        if self.policy == "all" or (self.policy == "sampled"
                                    and n in self.sample_indices):
            self.samples.append((n, t, alpha))

    @property
    def last(self):
        if not self._hist:
            raise ValidationError("trajectory is empty")
        return self._hist[-1]

    @property
    def prev(self):
        if len(self._hist) < 2:
            raise ValidationError("trajectory has fewer than two levels")
        return self._hist[-2]


class LinearSolveWorkspace:
    """Dense LU of a stepping matrix, reused across steps.

    tau/b0 are advisory metadata echoed in error messages so a failed
    factorization points at the stability bound τ < 1/(4·b₀).
    """

    def __init__(self, matrix, tau=None, b0=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValidationError("stepping matrix must be square")
        self.matrix = matrix
        self.tau = tau
        self.b0 = b0
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                self.lu, self.piv = scipy.linalg.lu_factor(matrix)
        except np.linalg.LinAlgError as exc:    # pragma: no cover - rare
            raise SingularMatrixError(self._singular_message()) from exc
        if np.min(np.abs(np.diag(self.lu))) == 0.0:
            raise SingularMatrixError(self._singular_message())

    def _singular_message(self):
        msg = "stepping matrix is singular"
        if self.tau is not None:
            msg += f" (tau = {self.tau:g}"
            if self.b0 is not None:
                msg += f"; stability advisory wants tau < {1.0 / (4.0 * self.b0):g}"
            msg += ")"
        return msg

    def solve(self, rhs, verify=False):
        # check_finite off: the trajectory push checks every state and
        # reports the offending step, which beats scipy's bare ValueError.
        x = scipy.linalg.lu_solve((self.lu, self.piv), rhs,
                                  check_finite=False)
        if verify:
            self.check_residual(rhs, x)
        return x

    def check_residual(self, rhs, x):
        if not np.isfinite(x).all():
            raise NumericalError("linear solve returned non-finite values")
        scale = max(float(np.abs(rhs).max()), 1e-300)
        res = float(np.abs(self.matrix @ x - rhs).max()) / scale
        if not (res <= RESIDUAL_TOL):
            raise NumericalError(
                f"linear solve residual {res:.3e} exceeds {RESIDUAL_TOL:g}")


def _unpack(matrices):
    if hasattr(matrices, "M"):
        return matrices.M, matrices.A, matrices.B
    M, A, B = matrices
    return M, A, B


def load_vector(mesh, dofmap, ref, field, exactness=None):
    """Assemble b_i = ∫ f φ_i dx by element quadrature (default 2r+2)."""
    if exactness is None:
        exactness = 2 * ref.degree + 2
    rule = simplex_quadrature(mesh.dim, exactness)
    Phi = ref.values(rule.points)
    verts = mesh.nodes[mesh.elements]
    detJ = np.abs(np.linalg.det(verts[:, 1:, :] - verts[:, :1, :]))
    pts = verts[:, :1, :] + np.einsum(
        "qm,emk->eqk", rule.points, verts[:, 1:, :] - verts[:, :1, :])
    f = np.asarray(field(pts.reshape(-1, mesh.dim)), dtype=float)
    f = np.broadcast_to(f, (pts.shape[0] * pts.shape[1],)).reshape(pts.shape[:2])
    w = f * rule.weights[None, :] * detJ[:, None]
    local = np.einsum("eq,qj->ej", w, Phi)
    b = np.zeros(dofmap.ndofs)
    np.add.at(b, dofmap.element_dofs, local)
    return b


def dirac_vector(mesh, dofmap, ref, point):
    """b_i = φ_i(x₀) for a unit point measure strictly inside the box."""
    x0 = np.asarray(point, dtype=float).reshape(-1)
    if x0.shape != (mesh.dim,):
        raise ValidationError(
            f"dirac point has {x0.shape[0]} coordinates, expected {mesh.dim}")
    lower = np.asarray(mesh.box.lower)
    upper = np.asarray(mesh.box.upper)
    if not (np.all(x0 > lower) and np.all(x0 < upper)):
        raise OutOfDomainError(
            f"dirac point {tuple(x0)} is not strictly inside the domain")
    eids, lam = locate_points(mesh, x0[None, :])
    phi = ref.values(lam)[0]
    b = np.zeros(dofmap.ndofs)
    np.add.at(b, dofmap.element_dofs[eids[0]], phi)
    return b


def l2_project(mesh, dofmap, ref, field=None, dirac=None, exactness=None,
               mass=None):
    """L² projection onto the FE space: solve Mα = b.

    Exactly one of ``field`` (callable on (n, dim) points) and
    ``dirac`` (point of a unit point measure, strictly inside the box)
    must be given.  For fields b_i = ∫ f φ_i dx with quadrature
    exactness ≥ 2r+2; for the Dirac b_i = φ_i(x₀), which preserves the
    zeroth moment exactly since the basis sums to one.
    """
    if (field is None) == (dirac is None):
        raise ValidationError("give exactly one of field and dirac")
    if dirac is not None:
        b = dirac_vector(mesh, dofmap, ref, dirac)
    else:
        b = load_vector(mesh, dofmap, ref, field, exactness)
    if mass is None:
        mass = assemble_mass(mesh, dofmap, ref)
    try:
        ws = LinearSolveWorkspace(mass)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            "mass matrix is singular, which signals an assembly bug") from exc
    return ws.solve(b, verify=True)


def bdf1_matrix(matrices, tau):
    M, A, B = _unpack(matrices)
    return M / tau + A - B


def bdf2_matrix(matrices, tau):
    M, A, B = _unpack(matrices)
    return 1.5 * M / tau + A - B


def step_bdf1(workspace, M, alpha0, tau, load=None):
    """One backward Euler step: (M/τ + A − B) α¹ = (M/τ) α⁰ [+ F¹]."""
    rhs = (M @ alpha0) / tau
    if load is not None:
        rhs = rhs + load
    return workspace.solve(rhs)


def step_bdf2(workspace, M, alpha_prev, alpha_prev2, tau, load=None):
    """One BDF2 step: (3M/(2τ) + A − B) αⁿ = (M/τ)(2αⁿ⁻¹ − ½αⁿ⁻²) [+ Fⁿ]."""
    rhs = (M @ (2.0 * alpha_prev - 0.5 * alpha_prev2)) / tau
    if load is not None:
        rhs = rhs + load
    return workspace.solve(rhs)


def run(matrices, grid: TimeGrid, alpha0, load=None, b0=None,
        sample_indices=None, storage="sampled"):
    """Integrate Mα' = (B−A)α [+ F(t)] over the grid.

    ``load`` is an optional callable t ↦ source vector (evaluated at
    the new time level of each implicit step).  Returns the trajectory;
    state sampling is controlled by ``sample_indices`` (the final level
    and the BDF2 history are always retained).  Warns when τ violates
    the b₀ stability advisory.  Verification residual checks run on
    the first step of each scheme and on every sampled level.
    """
    M, A, B = _unpack(matrices)
    if grid.nsteps < 2:
        raise ValidationError("BDF2 runs need at least two time steps")
    tau = grid.tau
    if b0 is not None and b0 > 0.0 and tau >= 1.0 / (4.0 * b0):
        warnings.warn(
            f"tau = {tau:g} is not below the stability advisory "
            f"1/(4 b0) = {1.0 / (4.0 * b0):g}", RuntimeWarning)
    alpha0 = np.asarray(alpha0, dtype=float)
    if sample_indices is None:
        sample_indices = range(grid.nsteps + 1) if storage == "all" else ()
    traj = StateTrajectory(alpha0.shape[0], policy=storage,
                           sample_indices=sample_indices)
    traj.push(0, 0.0, alpha0)

    # Bootstrap: extrapolated backward Euler, α¹ = 2·BE(τ/2)² − BE(τ).
    # A single BE step leaves an O(τ²) offset that a τ=1e-2 study never
    # recovers from; the extrapolation is O(τ³) and preserves any
    # linear invariant of the scheme (it is an affine combination).
    ws_h = LinearSolveWorkspace(bdf1_matrix((M, A, B), 0.5 * tau),
                                tau=0.5 * tau, b0=b0)
    ws_f = LinearSolveWorkspace(bdf1_matrix((M, A, B), tau), tau=tau, b0=b0)
    f_half = load(0.5 * tau) if load is not None else None
    f_full = load(grid.time(1)) if load is not None else None
    a_half = step_bdf1(ws_h, M, alpha0, 0.5 * tau, load=f_half)
    a_two = step_bdf1(ws_h, M, a_half, 0.5 * tau, load=f_full)
    a_one = step_bdf1(ws_f, M, alpha0, tau, load=f_full)
    alpha1 = 2.0 * a_two - a_one
    traj.push(1, grid.time(1), alpha1)
    del ws_h, ws_f

    ws2 = LinearSolveWorkspace(bdf2_matrix((M, A, B), tau), tau=tau, b0=b0)
    prev2, prev = alpha0, alpha1
    for n in range(2, grid.nsteps + 1):
        fn = load(grid.time(n)) if load is not None else None
        rhs = (M @ (2.0 * prev - 0.5 * prev2)) / tau
        if fn is not None:
            rhs = rhs + fn
        alpha = ws2.solve(rhs)
        traj.push(n, grid.time(n), alpha)
        if n == 2 or n == grid.nsteps or n in traj.sample_indices:
            ws2.check_residual(rhs, alpha)
        prev2, prev = prev, alpha
    return traj
