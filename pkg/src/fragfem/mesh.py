"""Structured simplicial meshes on axis-aligned boxes.

A box in R^d (d = 2 or 3) is discretized by per-axis node lines, either
uniformly spaced or geometrically graded toward the lower corner.  Each
tensor cell is split into d! simplices sharing the cell diagonal from
the low corner to the high corner (two triangles in 2D, the six-fold
Kuhn split in 3D), so refinement never changes the split pattern.

Element ids are cell-major: element = cell * nsimp + s where cells are
numbered in C order over the per-axis cell indices and s enumerates the
sub-simplices of a cell in a fixed permutation order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfDomainError, ValidationError

# Tolerance for point-in-element tests, relative to the axis extent
# (domain lookup) or expressed in barycentric coordinates (membership).
LOCATE_TOL = 1e-12

_GRADINGS = ("uniform", "geometric")


def _subsimplex_tables(dim):
    """Vertex corners and inverse edge maps of the unit-cell split.

    Returns (corners, einv, v0) where corners has shape
    (nsimp, dim+1, dim) with 0/1 entries, einv[s] maps unit-cell
    coordinates to barycentric weights lambda_1..lambda_d relative to
    sub-simplex s, and v0[s] is its first vertex.  Vertex order within
    each simplex is chosen so the affine map has positive determinant.
    """
    perms = list(itertools.permutations(range(dim)))
    corners = np.zeros((len(perms), dim + 1, dim))
    for s, perm in enumerate(perms):
        v = np.zeros((dim + 1, dim))
        for k, axis in enumerate(perm):
            v[k + 1] = v[k]
            v[k + 1, axis] += 1.0
        # odd permutations give a negative determinant; swapping two
        # vertices restores positive orientation without changing the set
        parity = sum(1 for i in range(dim) for j in range(i + 1, dim) if perm[i] > perm[j])
        if parity % 2 == 1:
            v[[1, 2]] = v[[2, 1]]
        corners[s] = v
    einv = np.zeros((len(perms), dim, dim))
    v0 = corners[:, 0, :].copy()
    for s in range(len(perms)):
        edges = (corners[s, 1:] - corners[s, 0]).T
        einv[s] = np.linalg.inv(edges)
    return corners, einv, v0


_TABLES = {2: _subsimplex_tables(2), 3: _subsimplex_tables(3)}


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned computational box [lower_1, upper_1] x ... in R^d."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi):
            raise ValidationError("lower and upper must have equal length")
        if len(lo) not in (2, 3):
            raise ValidationError(f"dimension must be 2 or 3, got {len(lo)}")
        if not all(np.isfinite(lo)) or not all(np.isfinite(hi)):
            raise ValidationError("box bounds must be finite")
        for a, b in zip(lo, hi):
            if not a < b:
                raise ValidationError(f"box requires lower < upper per axis, got [{a}, {b}]")

    @property
    def dim(self):
        return len(self.lower)


@dataclass(frozen=True)
class GridSpec:
    """Cell counts per axis and the grading law for the node lines."""

    cells: tuple
    grading: str = "uniform"

    def __post_init__(self):
        cells = tuple(int(n) for n in self.cells)
        object.__setattr__(self, "cells", cells)
        if any(n < 1 for n in cells):
            raise ValidationError(f"cell counts must be >= 1, got {cells}")
        if self.grading not in _GRADINGS:
            raise ValidationError(
                f"unknown grading {self.grading!r}, expected one of {_GRADINGS}"
            )


@dataclass
class Mesh:
    """Simplicial mesh produced by :func:`build_mesh`."""

    box: DomainBox
    grading: str
    lines: tuple          # per-axis node line arrays
    nodes: np.ndarray     # (nvertices, dim) vertex coordinates, C order
    elements: np.ndarray  # (nelements, dim+1) vertex ids
    h: float              # max element diameter
    _cell_strides: tuple = field(repr=False, default=())

    @property
    def dim(self):
        return self.box.dim

    @property
    def ncells(self):
        return tuple(len(ln) - 1 for ln in self.lines)

    @property
    def nsimp(self):
        """Number of sub-simplices per tensor cell (d!)."""
        return 2 if self.dim == 2 else 6

    def cell_of_element(self, elem):
        return elem // self.nsimp

    def subsimplex_of_element(self, elem):
        return elem % self.nsimp

    def cell_multi_index(self, cell):
        return np.unravel_index(cell, self.ncells)

    def cell_bounds(self, cell):
        idx = self.cell_multi_index(cell)
        lo = np.array([self.lines[k][i] for k, i in enumerate(idx)])
        hi = np.array([self.lines[k][i + 1] for k, i in enumerate(idx)])
        return lo, hi

    def element_vertices(self, elem):
        return self.nodes[self.elements[elem]]

    def element_diameters(self):
        """Per-element diameter (largest pairwise vertex distance)."""
        verts = self.nodes[self.elements]  # (E, d+1, d)
        diff = verts[:, :, None, :] - verts[:, None, :, :]
        return np.sqrt((diff ** 2).sum(-1)).max(axis=(1, 2))

    def element_volumes(self):
        verts = self.nodes[self.elements]
        edges = verts[:, 1:, :] - verts[:, :1, :]
        dets = np.linalg.det(edges)
        fact = 2.0 if self.dim == 2 else 6.0
        return dets / fact


def _node_lines(box, spec):
    lines = []
    for k in range(box.dim):
        a, b, n = box.lower[k], box.upper[k], spec.cells[k]
        if spec.grading == "uniform":
            ln = np.linspace(a, b, n + 1)
        else:
            if a <= 0.0:
                raise ValidationError(
                    "geometric grading requires a strictly positive lower bound"
                )
            ln = a * (b / a) ** (np.arange(n + 1) / n)
            ln[0], ln[-1] = a, b
        lines.append(ln)
    return tuple(lines)


def build_mesh(box: DomainBox, spec: GridSpec) -> Mesh:
    """Build the structured simplicial mesh for a box and grid spec.

    Parameters
    ----------
    box : DomainBox
    spec : GridSpec
        Cell counts must match the box dimension.

    Returns
    -------
    Mesh
        Conforming mesh whose elements tile the box exactly and have
        positive volumes.
    """
    if len(spec.cells) != box.dim:
        raise ValidationError(
            f"grid has {len(spec.cells)} axes but the box has {box.dim}"
        )
    lines = _node_lines(box, spec)
    dim = box.dim
    vshape = tuple(len(ln) for ln in lines)
    grids = np.meshgrid(*lines, indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)

    corners, _, _ = _TABLES[dim]
    nsimp = corners.shape[0]
    ncells = spec.cells
    cell_idx = np.stack(
        np.meshgrid(*[np.arange(n) for n in ncells], indexing="ij"), axis=-1
    ).reshape(-1, dim)  # (C, d) in C order

    corner_int = corners.astype(np.int64)  # (nsimp, d+1, d)
    # vertex grid index of every element vertex: cell index + 0/1 offset
    vidx = cell_idx[:, None, None, :] + corner_int[None, :, :, :]  # (C, nsimp, d+1, d)
    elements = np.ravel_multi_index(
        tuple(vidx[..., k] for k in range(dim)), vshape
    ).reshape(-1, dim + 1)

    widths = [np.diff(ln) for ln in lines]
    wgrids = np.meshgrid(*widths, indexing="ij")
    diag = np.sqrt(sum(w.reshape(-1) ** 2 for w in wgrids))
    h = float(diag.max())

    mesh = Mesh(box=box, grading=spec.grading, lines=lines, nodes=nodes,
                elements=elements.astype(np.int64), h=h)
    return mesh


def _axis_candidates(line, x, tol):
    """Cell index candidates along one axis, lowest first."""
    n = len(line) - 1
    i = int(np.searchsorted(line, x, side="right")) - 1
    i = min(max(i, 0), n - 1)
    cands = []
    if i > 0 and x - line[i] <= tol:
        cands.append(i - 1)
    cands.append(i)
    if i < n - 1 and line[i + 1] - x <= tol:
        cands.append(i + 1)
    return cands


def locate_point(mesh: Mesh, point, tol: float = LOCATE_TOL) -> int:
    """Find the element containing a point.

    Ties on shared faces resolve to the lowest element id, so repeated
    queries are deterministic.  Points farther than ``tol`` (relative to
    the axis extent) outside the box raise :class:`OutOfDomainError`.
    """
    x = np.asarray(point, dtype=float)
    if x.shape != (mesh.dim,):
        raise ValidationError(f"point must have shape ({mesh.dim},)")
    lo = np.array(mesh.box.lower)
    hi = np.array(mesh.box.upper)
    atol = tol * (hi - lo)
    if np.any(x < lo - atol) or np.any(x > hi + atol):
        raise OutOfDomainError(f"point {tuple(x)} lies outside the box")
    x = np.minimum(np.maximum(x, lo), hi)

    _, einv, v0 = _TABLES[mesh.dim]
    nsimp = mesh.nsimp
    cands = [
        _axis_candidates(mesh.lines[k], x[k], atol[k]) for k in range(mesh.dim)
    ]
    strides = np.cumprod((mesh.ncells + (1,))[::-1])[::-1][1:]  # C-order strides
    best = None
    for cell in itertools.product(*cands):
        clo = np.array([mesh.lines[k][cell[k]] for k in range(mesh.dim)])
        chi = np.array([mesh.lines[k][cell[k] + 1] for k in range(mesh.dim)])
        xi = (x - clo) / (chi - clo)
        for s in range(nsimp):
            lam = einv[s] @ (xi - v0[s])
            if lam.min() >= -tol and lam.sum() <= 1.0 + tol:
                eid = int(np.dot(cell, strides)) * nsimp + s
                if best is None or eid < best:
                    best = eid
        if best is not None:
            # candidate cells are visited in ascending id order, so the
            # first cell with a hit already holds the lowest element id
            break
    if best is None:
        raise OutOfDomainError(f"no element contains point {tuple(x)}")
    return best


def locate_points(mesh: Mesh, points, tol: float = LOCATE_TOL):
    """Vectorized :func:`locate_point` returning simplex coordinates too.

    Returns ``(element_ids, local)`` with shapes (n,) and (n, dim);
    ``local`` are the affine coordinates of each point with respect to
    its element's vertices (in element vertex order), suitable for
    reference-element evaluation.  Tie handling matches locate_point:
    points within tolerance of a shared face resolve to the lowest
    element id.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != mesh.dim:
        raise ValidationError(f"points must have shape (n, {mesh.dim})")
    lo = np.array(mesh.box.lower)
    hi = np.array(mesh.box.upper)
    atol = tol * (hi - lo)
    if np.any(pts < lo - atol) or np.any(pts > hi + atol):
        bad = np.argmax(np.any((pts < lo - atol) | (pts > hi + atol), axis=1))
        raise OutOfDomainError(f"point {tuple(pts[bad])} lies outside the box")
    pts = np.clip(pts, lo, hi)

    n = pts.shape[0]
    dim = mesh.dim
    idx = np.empty((n, dim), dtype=np.int64)
    ref = np.empty((n, dim))
    # only proximity to the *lower* cell line can yield a lower element
    # id than the searchsorted cell, so only that case is ambiguous
    ambiguous = np.zeros(n, dtype=bool)
    for k in range(dim):
        line = mesh.lines[k]
        i = np.searchsorted(line, pts[:, k], side="right") - 1
        i = np.clip(i, 0, len(line) - 2)
        idx[:, k] = i
        ref[:, k] = (pts[:, k] - line[i]) / (line[i + 1] - line[i])
        ambiguous |= (i > 0) & (pts[:, k] - line[i] <= atol[k])

    _, einv, v0 = _TABLES[dim]
    nsimp = mesh.nsimp
    strides = np.cumprod((mesh.ncells + (1,))[::-1])[::-1][1:]
    cell_lin = idx @ strides
    eids = np.full(n, -1, dtype=np.int64)
    loc = np.zeros((n, dim))
    undone = np.ones(n, dtype=bool)
    for s in range(nsimp):
        lam = (ref - v0[s]) @ einv[s].T
        ok = undone & (lam.min(axis=1) >= -tol) & (lam.sum(axis=1) <= 1.0 + tol)
        eids[ok] = cell_lin[ok] * nsimp + s
        loc[ok] = lam[ok]
        undone &= ~ok

    for j in np.nonzero(undone | ambiguous)[0]:
        e = locate_point(mesh, pts[j], tol)
        eids[j] = e
        cell, s = e // nsimp, e % nsimp
        clo, chi = mesh.cell_bounds(cell)
        xi = (pts[j] - clo) / (chi - clo)
        loc[j] = einv[s] @ (xi - v0[s])
    return eids, loc


def axis_panels(mesh: Mesh, lo):
    """Decompose [lo, upper] into boxes aligned with the mesh lines.

    Per axis the first interval runs from ``lo`` to the next node line
    (a partial slab unless ``lo`` sits on a line); the rest follow the
    cell structure.  Panels are returned in C order as a pair of
    (P, dim) arrays; P may be zero when some ``lo_k`` equals the upper
    bound.  The panel measures sum to the measure of [lo, upper].
    """
    x = np.asarray(lo, dtype=float)
    if x.shape != (mesh.dim,):
        raise ValidationError(f"lo must have shape ({mesh.dim},)")
    lower = np.array(mesh.box.lower)
    upper = np.array(mesh.box.upper)
    atol = LOCATE_TOL * (upper - lower)
    if np.any(x < lower - atol) or np.any(x > upper + atol):
        raise OutOfDomainError(f"panel corner {tuple(x)} lies outside the box")
    x = np.minimum(np.maximum(x, lower), upper)

    per_axis = []
    for k in range(mesh.dim):
        line = mesh.lines[k]
        idx = int(np.searchsorted(line, x[k], side="right"))
        pts = np.concatenate(([x[k]], line[idx:]))
        a, b = pts[:-1], pts[1:]
        keep = b > a
        per_axis.append((a[keep], b[keep]))
    counts = [len(a) for a, _ in per_axis]
    total = int(np.prod(counts))
    if total == 0 or min(counts) == 0:
        z = np.zeros((0, mesh.dim))
        return z, z.copy()
    los = np.stack(
        np.meshgrid(*[a for a, _ in per_axis], indexing="ij"), axis=-1
    ).reshape(-1, mesh.dim)
    his = np.stack(
        np.meshgrid(*[b for _, b in per_axis], indexing="ij"), axis=-1
    ).reshape(-1, mesh.dim)
    return los, his
