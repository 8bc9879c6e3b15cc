"""Moments, error norms, EOC tables and conservation drift.

Moment weights are integrated with a quadrature that is exact for the
monomial times the basis degree, so w·α carries no quadrature error and
conservation checks probe the scheme itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateSequenceError, ValidationError
from .fem_basis import simplex_quadrature


def _element_geometry(mesh):
    verts = mesh.nodes[mesh.elements]
    edges = verts[:, 1:, :] - verts[:, :1, :]
    detJ = np.abs(np.linalg.det(edges))
    return verts, edges, detJ


def _map_points(verts, edges, lam):
    return verts[:, :1, :] + np.einsum("qm,emk->eqk", lam, edges)


@dataclass(frozen=True)
class MomentWeights:
    """Weight vector of the (r, s[, q]) moment: w_i = ∫ x^order φ_i dx."""

    order: tuple
    weights: np.ndarray


def moment_weights(mesh, dofmap, ref, order) -> MomentWeights:
    order = tuple(int(k) for k in order)
    if len(order) != mesh.dim:
        raise ValidationError(
            f"moment order {order} has {len(order)} entries for a "
            f"{mesh.dim}d mesh")
    if any(k < 0 for k in order):
        raise ValidationError(f"moment order must be non-negative, got {order}")
    rule = simplex_quadrature(mesh.dim, sum(order) + ref.degree)
    Phi = ref.values(rule.points)
    verts, edges, detJ = _element_geometry(mesh)
    pts = _map_points(verts, edges, rule.points)
    mono = np.ones(pts.shape[:2])
    for k, p in enumerate(order):
        if p:
            mono *= pts[:, :, k] ** p
    w = mono * rule.weights[None, :] * detJ[:, None]
    local = np.einsum("eq,qj->ej", w, Phi)
    weights = np.zeros(dofmap.ndofs)
    np.add.at(weights, dofmap.element_dofs, local)
    return MomentWeights(order, weights)


def moment(alpha, weights: MomentWeights) -> float:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != weights.weights.shape:
        raise ValidationError(
            f"state has {alpha.shape} entries, weights have "
            f"{weights.weights.shape}")
    return float(weights.weights @ alpha)


def l2_h1_errors(alpha, exact, t, mesh, dofmap, ref, exact_grad=None,
                 exactness=None):
    """(L² error, H¹ error, relative L² error) of u_h against ``exact``.

    ``exact(points, t)`` returns values on (n, dim) points; the optional
    ``exact_grad(points, t)`` returns (n, dim) gradients.  Without it the
    gradient is taken by central differences, which caps the H¹ figure
    around 1e-9.  The relative error divides by ‖u‖ under the same rule.
    """
    if exactness is None:
        exactness = 2 * ref.degree + 4
    rule = simplex_quadrature(mesh.dim, exactness)
    Phi = ref.values(rule.points)
    Grad = ref.grads(rule.points)
    verts, edges, detJ = _element_geometry(mesh)
    pts = _map_points(verts, edges, rule.points)
    flat = pts.reshape(-1, mesh.dim)
    w = rule.weights[None, :] * detJ[:, None]

    ue = np.asarray(exact(flat, t), dtype=float).reshape(pts.shape[:2])
    ed = dofmap.element_dofs
    alpha = np.asarray(alpha, dtype=float)
    uh = np.einsum("qj,ej->eq", Phi, alpha[ed])
    err2 = float(np.einsum("eq,eq->", (uh - ue) ** 2, w))
    norm2 = float(np.einsum("eq,eq->", ue ** 2, w))

    if exact_grad is not None:
        ge = np.asarray(exact_grad(flat, t), dtype=float)
    else:
        ge = _central_gradient(exact, flat, t)
    ge = ge.reshape(pts.shape[0], pts.shape[1], mesh.dim)
    einv = np.linalg.inv(edges)
    gx = np.einsum("qjm,ekm->eqjk", Grad, einv)
    gh = np.einsum("eqjk,ej->eqk", gx, alpha[ed])
    semi2 = float(np.einsum("eqk,eq->", (gh - ge) ** 2, w))

    l2 = np.sqrt(err2)
    h1 = np.sqrt(err2 + semi2)
    rel = l2 / np.sqrt(norm2) if norm2 > 0.0 else np.inf
    return l2, h1, rel


def _central_gradient(exact, flat, t):
    g = np.empty_like(flat)
    for k in range(flat.shape[1]):
        step = 1e-6 * (1.0 + np.abs(flat[:, k]))
        hi = flat.copy()
        hi[:, k] += step
        lo = flat.copy()
        lo[:, k] -= step
        g[:, k] = (np.asarray(exact(hi, t), dtype=float)
                   - np.asarray(exact(lo, t), dtype=float)) / (2.0 * step)
    return g


def eoc(errors: Sequence[float], hs: Sequence[float]):
    """Pairwise orders ln(e_i/e_{i+1}) / ln(h_i/h_{i+1})."""
    errors = [float(e) for e in errors]
    hs = [float(h) for h in hs]
    if len(errors) != len(hs):
        raise ValidationError("errors and mesh sizes differ in length")
    if len(errors) < 2:
        raise ValidationError("need at least two refinement levels")
    if any(e == 0.0 for e in errors):
        raise DegenerateSequenceError("zero error makes the order undefined")
    if any(h2 >= h1 for h1, h2 in zip(hs, hs[1:])):
        raise DegenerateSequenceError("mesh sizes must strictly decrease")
    return [np.log(e1 / e2) / np.log(h1 / h2)
            for (e1, e2), (h1, h2) in zip(zip(errors, errors[1:]),
                                          zip(hs, hs[1:]))]


@dataclass
class ErrorReport:
    """Refinement-study rows and the derived pairwise orders."""

    hs: list = field(default_factory=list)
    l2: list = field(default_factory=list)
    h1: list = field(default_factory=list)
    rel_l2: list = field(default_factory=list)
    mms_active: list = field(default_factory=list)

    def add_row(self, h, l2, h1, rel_l2, mms=False):
        self.hs.append(float(h))
        self.l2.append(float(l2))
        self.h1.append(float(h1))
        self.rel_l2.append(float(rel_l2))
        self.mms_active.append(bool(mms))

    def eoc_l2(self):
        return eoc(self.l2, self.hs)

    def terminal_eoc(self):
        return self.eoc_l2()[-1]


@dataclass(frozen=True)
class ConservationRow:
    step: int
    t: float
    number: float
    mass: float
    mass_drift_rel: float


def conservation_series(trajectory, number_weights: MomentWeights,
                        mass_weights: MomentWeights):
    """Per sampled level: m₀₀, total mass and its relative drift vs t=0.

    ``mass_weights`` is the summed first-moment weight vector (built by
    ``first_moment_weights``); the drift is measured against the first
    sampled level, which callers should make level 0.
    """
    rows = []
    mass0 = None
    for n, t, alpha in trajectory.samples:
        num = moment(alpha, number_weights)
        mass = moment(alpha, mass_weights)
        if mass0 is None:
            mass0 = mass
        drift = abs(mass - mass0) / abs(mass0) if mass0 != 0.0 else 0.0
        rows.append(ConservationRow(n, t, num, mass, drift))
    return rows


def first_moment_weights(mesh, dofmap, ref) -> MomentWeights:
    """Weights of Σ_k 𝓜_{e_k}, the total-mass functional."""
    total = np.zeros(dofmap.ndofs)
    orders = np.eye(mesh.dim, dtype=int)
    for row in orders:
        total += moment_weights(mesh, dofmap, ref, tuple(row)).weights
    return MomentWeights(("mass",), total)
