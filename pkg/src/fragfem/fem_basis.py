"""Lagrange reference elements, quadrature rules and dof numbering.

Reference simplices carry equispaced Lagrange nodes of degree 1 to 3.
Simplex quadrature uses the conical (Duffy) product of Gauss-Jacobi
rules, so rules of arbitrary polynomial exactness are available in 2D
and 3D; box rules are plain tensor Gauss-Legendre on the unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

from .errors import ValidationError

SUPPORTED_DEGREES = (1, 2, 3)


def _bary_tuples(dim, degree):
    """Integer barycentric tuples (b0..bd) with sum == degree.

    Enumerated by the lexicographic order of the Cartesian exponents
    (i1..id); b0 is the slack.  This order is the local dof order.
    """
    out = []
    # lexicographic in (i1..id): i1 slowest
    idx = []

    def lex(prefix, axes_left):
        if axes_left == 0:
            if sum(prefix) <= degree:
                idx.append(tuple(prefix))
            return
        for i in range(degree + 1):
            lex(prefix + [i], axes_left - 1)

    lex([], dim)
    for e in idx:
        out.append((degree - sum(e),) + e)
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True)
class ReferenceElement:
    """Equispaced Lagrange element on the unit reference simplex."""

    dim: int
    degree: int
    nodes: np.ndarray      # (nloc, dim) reference coordinates
    bary_int: np.ndarray   # (nloc, dim+1) integer barycentric tuples
    exponents: np.ndarray  # (nloc, dim) monomial exponents
    coeffs: np.ndarray     # (nloc, nloc) monomial coefficients per shape fn

    @property
    def nloc(self):
        return self.nodes.shape[0]

    def values(self, points):
        """Shape function values, shape (npts, nloc)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        mono = np.ones((pts.shape[0], self.exponents.shape[0]))
        for k in range(self.dim):
            mono *= pts[:, k:k + 1] ** self.exponents[:, k]
        return mono @ self.coeffs

    def grads(self, points):
        """Shape function gradients, shape (npts, nloc, dim)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        npts = pts.shape[0]
        nmono = self.exponents.shape[0]
        out = np.zeros((npts, self.nloc, self.dim))
        for a in range(self.dim):
            dm = np.ones((npts, nmono))
            for k in range(self.dim):
                e = self.exponents[:, k].copy()
                if k == a:
                    dm *= e
                    e = np.maximum(e - 1, 0)
                dm *= pts[:, k:k + 1] ** e
            out[:, :, a] = dm @ self.coeffs
        return out


def make_reference_element(dim: int, degree: int) -> ReferenceElement:
    """Construct the degree-1..3 Lagrange element on the unit simplex.

    Shape functions satisfy the Kronecker property at the equispaced
    nodes and reproduce polynomials up to ``degree`` exactly.
    """
    if dim not in (2, 3):
        raise ValidationError(f"dimension must be 2 or 3, got {dim}")
    if degree not in SUPPORTED_DEGREES:
        raise ValidationError(
            f"degree must be one of {SUPPORTED_DEGREES}, got {degree}"
        )
    bary = _bary_tuples(dim, degree)
    nodes = bary[:, 1:] / float(degree)
    exponents = bary[:, 1:].copy()
    nloc = nodes.shape[0]
    vand = np.ones((nloc, nloc))
    for k in range(dim):
        vand *= nodes[:, k:k + 1] ** exponents[:, k]
    coeffs = np.linalg.inv(vand)
    return ReferenceElement(dim=dim, degree=degree, nodes=nodes,
                            bary_int=bary, exponents=exponents, coeffs=coeffs)


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference domain."""

    points: np.ndarray   # (n, dim)
    weights: np.ndarray  # (n,)
    domain: str          # "simplex" or "box"
    exactness: int

    @property
    def npoints(self):
        return self.points.shape[0]


def _gauss_jacobi_01(n, alpha):
    """Gauss rule on [0,1] for the weight (1-t)^alpha."""
    if alpha == 0:
        x, w = np.polynomial.legendre.leggauss(n)
    else:
        x, w = roots_jacobi(n, alpha, 0.0)
    t = 0.5 * (x + 1.0)
    return t, w * 0.5 ** (alpha + 1)


def simplex_quadrature(dim: int, degree: int) -> QuadratureRule:
    """Conical-product rule on the unit simplex, exact to ``degree``.

    The rule integrates all polynomials of total degree <= ``degree``
    exactly; weights are positive and sum to the simplex measure 1/d!.
    """
    if dim not in (2, 3):
        raise ValidationError(f"dimension must be 2 or 3, got {dim}")
    if degree < 0:
        raise ValidationError("exactness degree must be >= 0")
    n = max(1, (degree + 2) // 2)  # Gauss: 2n-1 >= degree
    if dim == 2:
        tx, wx = _gauss_jacobi_01(n, 1)
        ty, wy = _gauss_jacobi_01(n, 0)
        X, Y = np.meshgrid(tx, ty, indexing="ij")
        WX, WY = np.meshgrid(wx, wy, indexing="ij")
        px = X
        py = Y * (1.0 - X)
        w = WX * WY
        pts = np.stack([px.reshape(-1), py.reshape(-1)], axis=1)
    else:
        tx, wx = _gauss_jacobi_01(n, 2)
        ty, wy = _gauss_jacobi_01(n, 1)
        tz, wz = _gauss_jacobi_01(n, 0)
        X, Y, Z = np.meshgrid(tx, ty, tz, indexing="ij")
        WX, WY, WZ = np.meshgrid(wx, wy, wz, indexing="ij")
        px = X
        py = Y * (1.0 - X)
        pz = Z * (1.0 - X) * (1.0 - Y)
        w = WX * WY * WZ
        pts = np.stack([px.reshape(-1), py.reshape(-1), pz.reshape(-1)], axis=1)
    return QuadratureRule(points=pts, weights=w.reshape(-1),
                          domain="simplex", exactness=2 * n - 1)


def box_quadrature(dim: int, npts: int) -> QuadratureRule:
    """Tensor Gauss-Legendre rule on the unit cube [0,1]^dim."""
    if dim not in (1, 2, 3):
        raise ValidationError(f"dimension must be 1, 2 or 3, got {dim}")
    if npts < 1:
        raise ValidationError("need at least one point per axis")
    x, w = np.polynomial.legendre.leggauss(npts)
    t = 0.5 * (x + 1.0)
    wt = 0.5 * w
    axes = [t] * dim
    wts = [wt] * dim
    P = np.meshgrid(*axes, indexing="ij")
    W = np.meshgrid(*wts, indexing="ij")
    pts = np.stack([p.reshape(-1) for p in P], axis=1)
    wgt = np.prod(np.stack([g.reshape(-1) for g in W], axis=0), axis=0)
    return QuadratureRule(points=pts, weights=wgt, domain="box",
                          exactness=2 * npts - 1)


@dataclass(frozen=True)
class DofMap:
    """Global Lagrange dof numbering for a mesh and degree."""

    degree: int
    ndofs: int
    element_dofs: np.ndarray  # (E, nloc)
    coords: np.ndarray        # (ndofs, dim)


def build_dof_map(mesh, degree: int) -> DofMap:
    """Number the Lagrange dofs of ``degree`` on a simplicial mesh.

    Numbering is deterministic: grid vertices first (in vertex order),
    then edge dofs on lexicographically sorted edges (oriented from the
    lower to the higher vertex id), then face dofs (3D, degree 3), then
    per-element interior dofs (2D, degree 3).  Shared entities receive
    one dof, so the map is conforming.
    """
    ref = make_reference_element(mesh.dim, degree)
    elems = mesh.elements
    nelem = elems.shape[0]
    nloc = ref.nloc
    bary = ref.bary_int

    # classify local nodes once
    kinds = []
    for b in bary:
        nz = np.nonzero(b)[0]
        kinds.append((len(nz), tuple(nz), tuple(b[nz])))

    edge_keys = {}
    face_keys = {}
    interior = {}
    element_dofs = np.zeros((nelem, nloc), dtype=np.int64)

    # pass 1: collect entities
    edge_set = set()
    face_set = set()
    for e in range(nelem):
        ev = elems[e]
        for count, nz, _ in kinds:
            if count == 2:
                a, b = int(ev[nz[0]]), int(ev[nz[1]])
                edge_set.add((min(a, b), max(a, b)))
            elif count == 3 and mesh.dim == 3:
                tri = tuple(sorted(int(ev[i]) for i in nz))
                face_set.add(tri)

    nvert = mesh.nodes.shape[0]
    next_dof = nvert
    for key in sorted(edge_set):
        edge_keys[key] = next_dof
        next_dof += degree - 1
    for key in sorted(face_set):
        face_keys[key] = next_dof
        next_dof += 1
    uses_interior = mesh.dim == 2 and degree == 3
    if uses_interior:
        for e in range(nelem):
            interior[e] = next_dof
            next_dof += 1

    ndofs = next_dof
    coords = np.zeros((ndofs, mesh.dim))
    coords[:nvert] = mesh.nodes

    for e in range(nelem):
        ev = elems[e]
        for l, (count, nz, bvals) in enumerate(kinds):
            if count == 1:
                g = int(ev[nz[0]])
            elif count == 2:
                a, b = int(ev[nz[0]]), int(ev[nz[1]])
                wa, wb = bvals
                if a <= b:
                    lo_v, hi_v, par = a, b, wb
                else:
                    lo_v, hi_v, par = b, a, wa
                g = edge_keys[(lo_v, hi_v)] + (par - 1)
                coords[g] = ((degree - par) * mesh.nodes[lo_v]
                             + par * mesh.nodes[hi_v]) / degree
            elif count == 3 and mesh.dim == 3:
                tri = tuple(sorted(int(ev[i]) for i in nz))
                g = face_keys[tri]
                coords[g] = mesh.nodes[list(tri)].mean(axis=0)
            else:  # 2D interior bubble
                g = interior[e]
                coords[g] = mesh.nodes[ev].mean(axis=0)
            element_dofs[e, l] = g

    return DofMap(degree=degree, ndofs=ndofs,
                  element_dofs=element_dofs, coords=coords)
