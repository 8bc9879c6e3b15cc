"""Assembly of the dense Galerkin system M, A, B.

M and A are plain element-loop Gram matrices.  B couples every dof to
all dofs "above" it, so both gain assemblers are built around the
region [x, upper]: the smooth-kernel path runs a compiled outer/inner
nest (see _gain_kernels), the halving-delta path substitutes z = 2x
and integrates over the mesh elements of the z region directly, which
keeps the mass-conservation contraction exact at quadrature level on
any mesh.

All assemblers are deterministic for any worker count: the compiled
path reduces per-element blocks in element order, everything else is
serial numpy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from . import _gain_kernels as _gk
from .errors import NonFiniteError, ValidationError
from .fem_basis import simplex_quadrature
from .mesh import _TABLES
from .model import HALVING_DELTA, SMOOTH

_BLOCK_BUDGET_BYTES = 48 << 20


@dataclass(frozen=True)
class GainQuadrature:
    """Quadrature configuration for the smooth-kernel gain assembly.

    outer_exactness defaults to 2r+2 (matching the selection matrix so
    the conservation contractions cancel at quadrature level); the
    inner rule default is degree-5 exact per panel piece.  A finite
    panel_ratio_cap geometrically subdivides any panel interval whose
    upper/lower ratio exceeds it, which is what makes 1/y-type kernels
    integrable to high accuracy on coarse graded meshes.
    """

    outer_exactness: Optional[int] = None
    inner_exactness: int = 5
    panel_ratio_cap: Optional[float] = None

    def __post_init__(self):
        if self.outer_exactness is not None and self.outer_exactness < 0:
            raise ValidationError("outer_exactness must be >= 0")
        if self.inner_exactness < 0:
            raise ValidationError("inner_exactness must be >= 0")
        cap = self.panel_ratio_cap
        if cap is not None and cap <= 1.0:
            raise ValidationError("panel_ratio_cap must exceed 1")


@dataclass(frozen=True)
class SystemMatrices:
    """Assembled dense system with its provenance metadata."""

    M: np.ndarray
    A: np.ndarray
    B: np.ndarray
    degree: int
    kernel_kind: str
    info: dict

    @property
    def ndofs(self):
        return self.M.shape[0]


def _element_geometry(mesh):
    verts = mesh.nodes[mesh.elements]
    detJ = np.abs(np.linalg.det(verts[:, 1:, :] - verts[:, :1, :]))
    return verts, detJ


def assemble_mass(mesh, dofmap, ref, exactness=None):
    """Mass matrix M_ji = ∫ φ_i φ_j dx (exact: polynomial integrand)."""
    return assemble_selection(mesh, dofmap, ref, None, exactness)


def assemble_selection(mesh, dofmap, ref, gamma, exactness=None):
    """Selection matrix A_ji = ∫ Γ φ_i φ_j dx by element quadrature.

    ``gamma`` is any callable mapping (n, dim) points to (n,) rates
    (pass None for Γ ≡ 1, which yields the mass matrix).  Raises
    NonFiniteError when Γ evaluates to NaN/Inf inside the domain.
    """
    if exactness is None:
        exactness = 2 * ref.degree + 2
    rule = simplex_quadrature(mesh.dim, exactness)
    Phi = ref.values(rule.points)                      # (nq, nloc)
    verts, detJ = _element_geometry(mesh)
    pts = verts[:, :1, :] + np.einsum(
        "qm,emk->eqk", rule.points, verts[:, 1:, :] - verts[:, :1, :])
    if gamma is None:
        g = np.ones(pts.shape[:2])
    else:
        g = np.asarray(gamma(pts.reshape(-1, mesh.dim)), dtype=float)
        if not np.isfinite(g).all():
            bad = pts.reshape(-1, mesh.dim)[~np.isfinite(g)][0]
            raise NonFiniteError(
                f"selection rate is not finite at {tuple(bad)}")
        g = g.reshape(pts.shape[:2])
    w = g * rule.weights[None, :] * detJ[:, None]      # (nel, nq)
    local = np.einsum("qj,eq,qi->eji", Phi, w, Phi)
    nd = dofmap.ndofs
    A = np.zeros((nd, nd))
    ed = dofmap.element_dofs
    np.add.at(A, (ed[:, :, None], ed[:, None, :]), local)
    return A


_NEST_MARKER = "0.0  # __BG_EXPR__"
_NEST_MEMO = {}
_NEST_DIR = None


def _nest_cache_dir():
    """Writable directory for the rendered gain nests and their numba
    cache; falls back to a per-process temp dir."""
    global _NEST_DIR
    if _NEST_DIR is not None:
        return _NEST_DIR
    env = os.environ.get("FRAGFEM_CACHE_DIR", "").strip()
    base = env or os.path.join(os.path.expanduser("~"), ".cache",
                               "fragfem-jit")
    try:
        os.makedirs(base, exist_ok=True)
        probe = os.path.join(base, f".probe-{os.getpid()}")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError:
        import tempfile

        base = tempfile.mkdtemp(prefix="fragfem-jit-")
    _NEST_DIR = base
    return base


def _nest_module(beta_expr, gamma_on_y):
    """Import the gain nest specialized to this β·Γ product.

    numba cannot disk-cache functions taking compiled functions as
    arguments, so the product is substituted into a copy of _gain_nest
    written under the cache dir; that copy compiles once per machine.
    The file name hashes the template and helper sources, so editing
    either invalidates stale caches.
    """
    import hashlib
    import importlib.util
    import sys

    expr = (f"({beta_expr.to_python_source()})"
            f" * ({gamma_on_y.to_python_source()})")
    mod = _NEST_MEMO.get(expr)
    if mod is not None:
        return mod
    pkg_dir = os.path.dirname(__file__)
    with open(os.path.join(pkg_dir, "_gain_nest.py")) as fh:
        template = fh.read()
    with open(os.path.join(pkg_dir, "_gain_kernels.py")) as fh:
        helpers = fh.read()
    if _NEST_MARKER not in template:
        raise RuntimeError("gain nest template is missing its marker")
    source = template.replace(_NEST_MARKER, f"({expr})")
    key = hashlib.sha1((source + helpers).encode()).hexdigest()[:16]
    name = f"fragfem_nest_{key}"
    path = os.path.join(_nest_cache_dir(), name + ".py")
    if not os.path.exists(path):
        tmp = f"{path}.{os.getpid()}.tmp"
        with open(tmp, "w") as fh:
            fh.write(source)
        os.replace(tmp, path)
    spec = importlib.util.spec_from_file_location(name, path)
    mod = importlib.util.module_from_spec(spec)
    sys.modules[name] = mod
    spec.loader.exec_module(mod)
    _NEST_MEMO[expr] = mod
    return mod


def _resolve_workers(workers):
    if workers is None:
        env = os.environ.get("FRAGFEM_THREADS", "").strip()
        workers = int(env) if env else numba.config.NUMBA_NUM_THREADS
    return max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS))


def _numba_mesh_tables(mesh):
    lmax = max(len(ln) for ln in mesh.lines)
    lines = np.zeros((3, lmax))
    nlines = np.zeros(3, dtype=np.int64)
    for k in range(mesh.dim):
        lines[k, : len(mesh.lines[k])] = mesh.lines[k]
        nlines[k] = len(mesh.lines[k])
    ncells = mesh.ncells
    strides = np.ones(3, dtype=np.int64)
    for k in range(mesh.dim - 2, -1, -1):
        strides[k] = strides[k + 1] * ncells[k + 1]
    return lines, nlines, strides


def _max_edges(mesh, cap):
    """Upper bound on panel intervals per axis for buffer sizing."""
    worst = 0
    for ln in mesh.lines[: mesh.dim]:
        base = len(ln)
        if cap is not None and ln[0] > 0.0:
            ratios = ln[1:] / ln[:-1]
            parts = np.ceil(np.log(ratios) / np.log(cap)).astype(int)
            parts = np.maximum(parts, 1)
            base = int(parts.sum()) + int(parts.max()) + 2
        worst = max(worst, base)
    return worst + 2


def assemble_gain_smooth(mesh, dofmap, ref, beta, gamma, quad=None,
                         workers=None):
    """Gain matrix B_ji = ∫ φ_j(x) [∫_{[x,upper]} β(x|y)Γ(y)φ_i(y) dy] dx.

    β must be a smooth-density kernel; the inner integral is evaluated
    over per-axis panels aligned with the mesh (plus the optional
    geometric subdivision from ``quad.panel_ratio_cap``), each panel
    integrated per clipped sub-simplex so the piecewise-polynomial
    basis is integrated exactly.  Raises NonFiniteError if the kernel
    product evaluates non-finite inside the domain.
    """
    if getattr(beta, "kind", SMOOTH) != SMOOTH:
        raise ValidationError("assemble_gain_smooth requires a smooth kernel")
    if quad is None:
        quad = GainQuadrature()
    r = ref.degree
    outer = quad.outer_exactness
    if outer is None:
        outer = 2 * r + 2
    oq = simplex_quadrature(mesh.dim, outer)
    iq = simplex_quadrature(mesh.dim, quad.inner_exactness)
    phi_out = ref.values(oq.points)
    phi_in = ref.values(iq.points)
    gamma_on_y = gamma.on_y()
    nest = _nest_module(beta.expr, gamma_on_y)
    x_free = not (beta.expr.free_identifiers() & {"x1", "x2", "x3"})

    lines, nlines, strides = _numba_mesh_tables(mesh)
    verts, detJ = _element_geometry(mesh)
    corners, einv, v0 = _TABLES[mesh.dim]
    ref_corners = np.ascontiguousarray(corners, dtype=float)
    cap = 0.0 if quad.panel_ratio_cap is None else float(quad.panel_ratio_cap)
    maxe = _max_edges(mesh, quad.panel_ratio_cap)
    maxt = 64 if mesh.dim == 2 else 512

    nel = mesh.elements.shape[0]
    nloc = ref.nloc
    nd = dofmap.ndofs
    eldofs = dofmap.element_dofs
    chunk = max(1, min(nel, _BLOCK_BUDGET_BYTES // (nloc * nd * 8)))
    nworkers = _resolve_workers(workers)
    numba.set_num_threads(nworkers)

    gwtab = np.empty((nel, len(iq.weights)))
    nest._fill_gwtab(verts, detJ, iq.points, iq.weights, mesh.dim, gwtab)
    if x_free and not np.isfinite(gwtab).all():
        raise NonFiniteError("kernel product is not finite inside the domain")

    B = np.zeros((nd, nd))
    e0 = 0
    while e0 < nel:
        e1 = min(nel, e0 + chunk)
        blocks = np.zeros((e1 - e0, nloc, nd))
        nest._gain_chunk(mesh.dim, mesh.nsimp, lines, nlines, strides,
                         ref_corners, verts, detJ, eldofs, einv, v0,
                         ref.exponents, ref.coeffs,
                         oq.points, oq.weights, phi_out,
                         iq.points, iq.weights, phi_in, gwtab, x_free,
                         cap, maxe, maxt, e0, blocks)
        # serial merge in element order: bit-identical for any worker count
        for c in range(e1 - e0):
            B[eldofs[e0 + c], :] += blocks[c]
        e0 = e1
    if not np.isfinite(B).all():
        raise NonFiniteError("gain matrix picked up non-finite entries; "
                             "the kernel product is singular inside the domain")
    return B


def _gk_atol(mesh):
    atol = np.zeros(3)
    for k in range(mesh.dim):
        atol[k] = 1e-14 * max(abs(mesh.box.lower[k]), abs(mesh.box.upper[k]))
    return atol


def _clip_numpy(simplices, dim, axis, bound, keep_ge, atol):
    """Python-side wrapper over the compiled simplex clipper."""
    src = np.ascontiguousarray(simplices, dtype=float)
    cap = 3 * max(1, src.shape[0]) + 8
    dst = np.empty((cap, dim + 1, dim))
    n = _gk._clip_simplices(src, src.shape[0], dst, dim, axis, bound,
                            keep_ge, atol)
    return dst[:n]


def assemble_gain_delta(mesh, dofmap, ref, gamma, exactness=None):
    """Gain matrix of the halving kernel via the substitution z = 2x.

    B_ji = 2·2^d ∫_{x∈D, 2x≤upper} φ_j(x) Γ(2x) φ_i(2x) dx
         = 2 ∫_{z∈[2·lower, upper]} φ_j(z/2) Γ(z) φ_i(z) dz.

    The z form keeps φ_i aligned with the mesh, so contracting the
    rows with any polynomial the space reproduces cancels against the
    selection matrix exactly at quadrature level (daughter positions
    z/2 are handled by point location).  Elements straddling the
    2·lower boundary are clipped.
    """
    from .mesh import locate_points

    d = mesh.dim
    if exactness is None:
        exactness = 2 * ref.degree + 2
    rule = simplex_quadrature(d, exactness)
    phi_src = ref.values(rule.points)
    verts, detJ = _element_geometry(mesh)
    eldofs = dofmap.element_dofs
    nd = dofmap.ndofs
    B = np.zeros((nd, nd))
    lo2 = 2.0 * np.array(mesh.box.lower)
    _, einv, v0 = _TABLES[d]
    nsimp = mesh.nsimp
    atol = _gk_atol(mesh)

    def scatter(eid, pts, wts, phi_i):
        g = np.asarray(gamma(pts), dtype=float) if gamma is not None \
            else np.ones(len(pts))
        w = 2.0 * wts * g
        eids_h, lam_h = locate_points(mesh, 0.5 * pts)
        phi_j = ref.values(lam_h)                      # (nq, nloc)
        rows = eldofs[eids_h]                          # (nq, nloc)
        cols = eldofs[eid]
        contrib = w[:, None, None] * phi_j[:, :, None] * phi_i[:, None, :]
        np.add.at(B, (rows[:, :, None], cols[None, None, :]), contrib)

    for e in range(mesh.elements.shape[0]):
        v = verts[e]
        vmin = v.min(axis=0)
        vmax = v.max(axis=0)
        if np.any(vmax <= lo2):
            continue
        if np.all(vmin >= lo2):
            pts = v[0] + rule.points @ (v[1:] - v[:1])
            scatter(e, pts, rule.weights * detJ[e], phi_src)
            continue
        # straddles the half-box boundary: clip by z_k >= 2*lower_k
        pieces = v[None, :, :]
        for k in range(d):
            if vmin[k] < lo2[k]:
                pieces = _clip_numpy(pieces, d, k, lo2[k], True, atol[k])
                if len(pieces) == 0:
                    break
        if len(pieces) == 0:
            continue
        s = e % nsimp
        clo, chi = mesh.cell_bounds(e // nsimp)
        size = chi - clo
        for piece in pieces:
            P = piece[1:] - piece[:1]
            det = abs(np.linalg.det(P))
            if det == 0.0:
                continue
            pts = piece[0] + rule.points @ P
            lam = ((pts - clo) / size - v0[s]) @ einv[s].T
            scatter(e, pts, rule.weights * det, ref.values(lam))
    if not np.isfinite(B).all():
        raise NonFiniteError("gain matrix picked up non-finite entries")
    return B


def assemble_system(mesh, dofmap, ref, gamma, kernel, quad=None,
                    workers=None):
    """Assemble M, A and the kind-appropriate B as one bundle."""
    M = assemble_mass(mesh, dofmap, ref)
    A = assemble_selection(mesh, dofmap, ref, gamma)
    if kernel.kind == HALVING_DELTA:
        B = assemble_gain_delta(mesh, dofmap, ref, gamma)
        q_info = {"exactness": 2 * ref.degree + 2}
    else:
        B = assemble_gain_smooth(mesh, dofmap, ref, kernel, gamma,
                                 quad=quad, workers=workers)
        q = quad or GainQuadrature()
        q_info = {
            "outer_exactness": q.outer_exactness or 2 * ref.degree + 2,
            "inner_exactness": q.inner_exactness,
            "panel_ratio_cap": q.panel_ratio_cap,
        }
    info = {
        "ncells": mesh.ncells,
        "grading": mesh.grading,
        "quadrature": q_info,
    }
    return SystemMatrices(M=M, A=A, B=B, degree=ref.degree,
                          kernel_kind=kernel.kind, info=info)


def dump_matrix(target, matrix, name="matrix"):
    """Write nonzero entries as ``row col value`` triplets.

    Values use 17 significant digits so a dump round-trips the double
    precision entries exactly.  ``target`` is a path or a file object.
    """
    mat = np.asarray(matrix)
    close = False
    if hasattr(target, "write"):
        f = target
    else:
        f = open(target, "w")
        close = True
    try:
        f.write(f"# {name} {mat.shape[0]} {mat.shape[1]}\n")
        rows, cols = np.nonzero(mat)
        for r, c in zip(rows, cols):
            f.write(f"{r} {c} {mat[r, c]:.17g}\n")
    finally:
        if close:
            f.close()
