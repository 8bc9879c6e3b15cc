"""Independent brute-force checks of the gain operator.

Everything here deliberately avoids the assembly module's quadrature
machinery: the gain integral is done by adaptive tensor-panel
refinement over the upstream box [x, xmax], so agreement between the
two routes is evidence, not tautology.  The same machinery decides per
test case whether its closed-form solution actually solves the
truncated problem or needs a manufactured source.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import QuadratureConvergenceError, ValidationError
from .fem_basis import simplex_quadrature
from .mesh import locate_points
from .model import SMOOTH

#: Successive refinements must agree to this relative gap.
DEFAULT_REL_TOL = 1e-9

_GAUSS_PTS = 6


def _gauss_panels(lo, hi, splits):
    """Gauss-Legendre nodes/weights on [lo, hi] split into graded panels.

    Panels are geometric with ratio <= 2 toward the lower end, which
    keeps 1/y-type factors smooth per panel even when lo is tiny; each
    base panel is then split ``splits`` times uniformly.
    """
    edges = [lo]
    while edges[-1] * 2.0 < hi:
        edges.append(edges[-1] * 2.0)
    edges.append(hi)
    edges = np.asarray(edges)
    if splits > 1:
        fine = np.linspace(edges[:-1], edges[1:], splits + 1, axis=1)
        edges = np.concatenate([fine[:, :-1].ravel(), [hi]])
    x, w = np.polynomial.legendre.leggauss(_GAUSS_PTS)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    pts = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    return pts, wts


def brute_force_gain(field, beta, gamma, point, box, t=0.0,
                     rel_tol=DEFAULT_REL_TOL, max_levels=7, base_splits=1):
    """∫_[x, xmax] β(x|y) Γ(y) u(y, t) dy by adaptive panel refinement.

    ``field(points, t)`` evaluates u on (n, dim) arrays.  Panels are
    halved per level until two successive estimates agree to rel_tol;
    running out of levels raises QuadratureConvergenceError carrying
    the best estimate and the last gap.
    """
    if beta.kind != SMOOTH:
        raise ValidationError("brute-force gain needs a smooth kernel")
    dim = box.dim
    x = np.asarray(point, dtype=float).reshape(-1)
    if x.shape != (dim,):
        raise ValidationError(
            f"point has {x.shape[0]} coordinates, expected {dim}")
    upper = np.asarray(box.upper, dtype=float)
    lower = np.asarray(box.lower, dtype=float)
    if np.any(x < lower - 1e-12) or np.any(x > upper + 1e-12):
        raise ValidationError(f"point {tuple(x)} is outside the box")
    if np.any(x >= upper):          # empty or degenerate upstream region
        return 0.0

    names = ["y1", "y2", "y3"][:dim]
    beta_env = {f"x{k + 1}": x[k] for k in range(dim)}

    def estimate(splits):
        axes = [_gauss_panels(x[k], upper[k], splits) for k in range(dim)]
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        wgrid = np.meshgrid(*[a[1] for a in axes], indexing="ij")
        ypts = np.stack([g.ravel() for g in grids], axis=1)
        wts = np.ones(len(ypts))
        for w in wgrid:
            wts *= w.ravel()
        env = dict(beta_env)
        env.update({names[k]: ypts[:, k] for k in range(dim)})
        vals = np.broadcast_to(
            np.asarray(beta.expr.evaluate(env), dtype=float), (len(ypts),))
        vals = vals * gamma(ypts) * np.asarray(field(ypts, t), dtype=float)
        return float(vals @ wts)

    if max_levels < 1:
        raise ValidationError("need at least one refinement level")
    prev = estimate(base_splits)
    splits = base_splits
    for _ in range(max_levels):
        splits *= 2
        cur = estimate(splits)
        gap = abs(cur - prev)
        if gap <= rel_tol * max(abs(cur), 1e-300):
            return cur
        prev = cur
    raise QuadratureConvergenceError(
        f"gain quadrature stalled at gap {gap:.3e} (estimate {cur:.12g})",
        estimate=cur, gap=gap)


def fe_field(mesh, dofmap, ref, alpha):
    """The FE function Σ αᵢφᵢ as an evaluator usable by the oracle."""
    alpha = np.asarray(alpha, dtype=float)

    def field(points, t=0.0):
        eids, lam = locate_points(mesh, points)
        phi = ref.values(lam)
        dofs = dofmap.element_dofs[eids]
        return np.einsum("nj,nj->n", phi, alpha[dofs])

    return field


def gain_matrix_check(B, alpha, mesh, dofmap, ref, beta, gamma,
                      outer_exactness=None, rel_tol=DEFAULT_REL_TOL):
    """Max relative mismatch of Bα against the brute-force gain.

    Compares (Bα)ⱼ with ∫ φⱼ(x)·Gain(u_h)(x) dx where the gain value at
    every outer quadrature point comes from ``brute_force_gain``.  The
    outer rule matches the assembly default (2r+2) unless overridden,
    so the mismatch isolates the assembly's inner quadrature.  Meant
    for small meshes; cost grows with every outer point.
    """
    if outer_exactness is None:
        outer_exactness = 2 * ref.degree + 2
    alpha = np.asarray(alpha, dtype=float)
    field = fe_field(mesh, dofmap, ref, alpha)
    rule = simplex_quadrature(mesh.dim, outer_exactness)
    Phi = ref.values(rule.points)
    verts = mesh.nodes[mesh.elements]
    edges = verts[:, 1:, :] - verts[:, :1, :]
    detJ = np.abs(np.linalg.det(edges))
    pts = verts[:, :1, :] + np.einsum("qm,emk->eqk", rule.points, edges)

    ref_vec = np.zeros(dofmap.ndofs)
    for e in range(mesh.elements.shape[0]):
        gvals = np.array([
            brute_force_gain(field, beta, gamma, pts[e, q], mesh.box,
                             rel_tol=rel_tol)
            for q in range(rule.npoints)])
        local = (rule.weights * gvals * detJ[e]) @ Phi
        np.add.at(ref_vec, dofmap.element_dofs[e], local)

    lhs = B @ alpha
    scale = max(float(np.abs(lhs).max()), 1e-300)
    return float(np.abs(lhs - ref_vec).max()) / scale


@dataclass(frozen=True)
class ResidualReport:
    """Sampled strong-form residual of a claimed exact solution."""

    samples: tuple                # ((x, t, r) triples)
    max_abs: float
    dt_scale: float               # max |∂ₜu| over the same samples
    threshold: float
    verdict: str                  # solves_truncated | needs_mms

    def __str__(self):
        return (f"max |residual| = {self.max_abs:.3e} vs threshold "
                f"{self.threshold:.3e} -> {self.verdict}")


@dataclass(frozen=True)
class MmsSource:
    """Manufactured source s = ∂ₜu + Γu − Gain(u) for the truncated box.

    Adding s to the right-hand side makes the prescribed solution exact
    for the truncated problem by construction.  ``provenance`` records
    whether the gain term used a closed form or the brute-force oracle.
    """

    evaluator: Callable
    provenance: str

    def __call__(self, points, t):
        return self.evaluator(points, t)


def _du_dt(case):
    if case.exact_solution is not None:
        expr = case.exact_solution.diff("t")

        def du(points, t):
            return _eval_xt(expr, points, t, case.dim)

        return du, "analytic"

    def du(points, t):          # pragma: no cover - bundled cases are analytic
        step = 1e-6 * (1.0 + t)
        return (case.exact_solution_at(points, t + step)
                - case.exact_solution_at(points, t - step)) / (2.0 * step)

    return du, "central-difference"


def _eval_xt(expr, points, t, dim):
    points = np.asarray(points, dtype=float)
    env = {f"x{k + 1}": points[:, k] for k in range(dim)}
    env["t"] = t
    return np.broadcast_to(
        np.asarray(expr.evaluate(env), dtype=float), (len(points),)).copy()


def _sample_lattice(box, per_axis):
    lines = [np.linspace(lo, hi, per_axis + 2)[1:-1]
             for lo, hi in zip(box.lower, box.upper)]
    grids = np.meshgrid(*lines, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def residual_and_mms(case, times=(0.0, 0.5, 1.0), per_axis=3,
                     rel_threshold=1e-6, rel_tol=DEFAULT_REL_TOL):
    """Test whether the case's exact solution solves the truncated form.

    Samples r = ∂ₜu + Γu − Gain(u) on an interior lattice × ``times``.
    The gain uses the case's closed form when bundled and the
    brute-force oracle otherwise.  Returns (report, source) where the
    source is None when the verdict is solves_truncated.
    """
    if case.exact_solution is None:
        raise ValidationError(
            f"case {case.case_id} has no exact solution to examine")
    du, _ = _du_dt(case)

    if case.exact_gain is not None:
        gain_at = case.exact_gain
        provenance = "closed-form truncated gain"
    else:
        def gain_at(points, t):
            def u(ypts, tt):
                return case.exact_solution_at(ypts, tt)
            return np.array([
                brute_force_gain(u, case.beta, case.gamma, p, case.domain,
                                 t=t, rel_tol=rel_tol)
                for p in np.asarray(points, dtype=float)])
        provenance = "brute-force gain"

    def source(points, t):
        points = np.asarray(points, dtype=float)
        u = case.exact_solution_at(points, t)
        return du(points, t) + case.gamma(points) * u - gain_at(points, t)

    pts = _sample_lattice(case.domain, per_axis)
    samples = []
    max_r = 0.0
    dt_scale = 0.0
    for t in times:
        r = source(pts, t)
        d = du(pts, t)
        max_r = max(max_r, float(np.abs(r).max()))
        dt_scale = max(dt_scale, float(np.abs(d).max()))
        samples.extend((tuple(p), float(t), float(rv))
                       for p, rv in zip(pts, r))
    threshold = rel_threshold * max(dt_scale, 1e-300)
    verdict = "needs_mms" if max_r > threshold else "solves_truncated"
    report = ResidualReport(tuple(samples), max_r, dt_scale, threshold,
                            verdict)
    if verdict == "solves_truncated":
        return report, None
    return report, MmsSource(source, provenance)
