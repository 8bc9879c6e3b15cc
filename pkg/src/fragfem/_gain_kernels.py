"""Compiled helpers shared by the smooth-kernel gain nest.

The gain integral nests a d-dimensional inner integral inside every
outer quadrature point, so this is the one hot spot of the package.
The inner region [x, upper] is decomposed into per-axis panels aligned
with the mesh lines (optionally geometrically subdivided for
near-singular kernels); every panel box is integrated per sub-simplex,
clipping the simplices against the box so that basis kinks along cell
diagonals never cross a quadrature panel.  Tensor Gauss on a kinked
integrand stalls at ~n^-2 relative error, which is why the clipping is
not optional.

The β·Γ-dependent part of the nest lives in specialized copies of
_gain_nest rendered per kernel product (see assembly); this module
holds only kernel-independent pieces so their compiled code is shared.

All kernels are deterministic: elements are processed independently
and reduced in element order by the caller, so results are bit-equal
for any worker count.
"""

import numpy as np
from numba import njit

# Ratio below which a panel interval is never geometrically subdivided.
MIN_CAP = 1.0 + 1e-9

# Snapping tolerance for clip planes in cell-local coordinates.
LOCAL_ATOL = 1e-12


@njit(cache=True, inline="always")
def _shape_values(lam, exponents, coeffs, out):
    """Lagrange shape values at one reference point ``lam``."""
    nmono, dim = exponents.shape
    nloc = coeffs.shape[1]
    for l in range(nloc):
        out[l] = 0.0
    for m in range(nmono):
        mono = 1.0
        for k in range(dim):
            e = exponents[m, k]
            for _ in range(e):
                mono *= lam[k]
        for l in range(nloc):
            out[l] += mono * coeffs[m, l]


@njit(cache=True)
def _build_edges(line, nline, xk, cap, edges, cells, lo_diff, hi_diff):
    """Panel intervals along one axis covering [xk, line[nline-1]].

    Fills per-interval arrays and returns the interval count.  Interval
    m spans [edges[m], edges[m+1]] inside cell cells[m]; the diff flags
    say whether an interval bound differs from its cell's bound (those
    are the only planes the simplex clipper must honour).
    """
    i0 = 0
    while i0 < nline and line[i0] <= xk:
        i0 += 1
    if i0 >= nline:
        return 0
    # base intervals: a first slab starting at xk (a full cell when xk
    # sits exactly on a line), then whole cells up to the domain edge
    if i0 == 0:
        first_cell = 0
        edges[0] = line[0]
    else:
        first_cell = i0 - 1
        edges[0] = xk
    cells[0] = first_cell
    n = 1
    for i in range(first_cell + 1, nline - 1):
        edges[n] = line[i]
        cells[n] = i
        n += 1
    edges[n] = line[nline - 1]
    if cap > MIN_CAP:
        # geometric subdivision, rewriting the interval list in place
        # from the back so earlier entries stay valid while reading
        total = n
        m_of = np.empty(n, dtype=np.int64)
        for m in range(n):
            a = edges[m]
            b = edges[m + 1]
            if a > 0.0 and b / a > cap:
                m_of[m] = int(np.ceil(np.log(b / a) / np.log(cap)))
            else:
                m_of[m] = 1
            total += m_of[m] - 1
        src = n - 1
        dst = total
        edges_src = edges[: n + 1].copy()
        cells_src = cells[:n].copy()
        while src >= 0:
            a = edges_src[src]
            b = edges_src[src + 1]
            parts = m_of[src]
            for j in range(parts, 0, -1):
                if j == parts:
                    edges[dst] = b
                else:
                    edges[dst] = a * (b / a) ** (j / parts)
                dst -= 1
                cells[dst] = cells_src[src]
            src -= 1
        edges[0] = edges_src[0]
        n = total
    for m in range(n):
        c = cells[m]
        lo_diff[m] = edges[m] != line[c]
        hi_diff[m] = edges[m + 1] != line[c + 1]
    return n


@njit(cache=True)
def _clip_simplices(src, nsrc, dst, dim, axis, bound, keep_ge, atol):
    """Clip simplices by the halfplane ±(y_axis - bound) >= 0.

    ``src``/``dst`` are (cap, dim+1, dim) buffers; returns the piece
    count written to ``dst``.  Pieces tile src ∩ halfplane exactly up
    to the snapping tolerance ``atol``.
    """
    nd = 0
    nv = dim + 1
    s = np.empty(nv)
    order = np.empty(nv, dtype=np.int64)
    for t in range(nsrc):
        n_in = 0
        for i in range(nv):
            v = src[t, i, axis] - bound
            if not keep_ge:
                v = -v
            s[i] = v
            if v >= -atol:
                n_in += 1
        if n_in == nv:
            for i in range(nv):
                for k in range(dim):
                    dst[nd, i, k] = src[t, i, k]
            nd += 1
            continue
        if n_in == 0:
            continue
        # stable partition: inside vertices first
        p = 0
        for i in range(nv):
            if s[i] >= -atol:
                order[p] = i
                p += 1
        for i in range(nv):
            if s[i] < -atol:
                order[p] = i
                p += 1
        if dim == 2:
            a, b, c = order[0], order[1], order[2]
            if n_in == 1:
                # triangle (a, cut_ab, cut_ac)
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                _cut(src, t, a, b, s, dst, nd, 1, dim)
                _cut(src, t, a, c, s, dst, nd, 2, dim)
                nd += 1
            else:  # n_in == 2, quad -> two triangles
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                    dst[nd, 1, k] = src[t, b, k]
                _cut(src, t, b, c, s, dst, nd, 2, dim)
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                    dst[nd, 1, k] = dst[nd - 1, 2, k]
                _cut(src, t, a, c, s, dst, nd, 2, dim)
                nd += 1
        else:
            a, b, c, d = order[0], order[1], order[2], order[3]
            if n_in == 1:
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                _cut(src, t, a, b, s, dst, nd, 1, dim)
                _cut(src, t, a, c, s, dst, nd, 2, dim)
                _cut(src, t, a, d, s, dst, nd, 3, dim)
                nd += 1
            elif n_in == 3:
                # frustum (a,b,c | ad,bd,cd) -> three tets
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                    dst[nd, 1, k] = src[t, b, k]
                    dst[nd, 2, k] = src[t, c, k]
                _cut(src, t, a, d, s, dst, nd, 3, dim)       # ad
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = src[t, b, k]
                    dst[nd, 1, k] = src[t, c, k]
                    dst[nd, 2, k] = dst[nd - 1, 3, k]        # ad
                _cut(src, t, b, d, s, dst, nd, 3, dim)       # bd
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = src[t, c, k]
                    dst[nd, 1, k] = dst[nd - 2, 3, k]        # ad
                    dst[nd, 2, k] = dst[nd - 1, 3, k]        # bd
                _cut(src, t, c, d, s, dst, nd, 3, dim)       # cd
                nd += 1
            else:
                # wedge (a, b | ac, ad, bc, bd) -> three tets
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                _cut(src, t, a, c, s, dst, nd, 1, dim)       # ac
                _cut(src, t, a, d, s, dst, nd, 2, dim)       # ad
                for k in range(dim):
                    dst[nd, 3, k] = src[t, b, k]
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = dst[nd - 1, 1, k]        # ac
                    dst[nd, 1, k] = dst[nd - 1, 2, k]        # ad
                    dst[nd, 2, k] = src[t, b, k]
                _cut(src, t, b, c, s, dst, nd, 3, dim)       # bc
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = dst[nd - 2, 2, k]        # ad
                    dst[nd, 1, k] = src[t, b, k]
                    dst[nd, 2, k] = dst[nd - 1, 3, k]        # bc
                _cut(src, t, b, d, s, dst, nd, 3, dim)       # bd
                nd += 1
    return nd


@njit(cache=True, inline="always")
def _cut(src, t, i, j, s, dst, nd, slot, dim):
    """Edge/halfplane intersection point written into dst[nd, slot]."""
    tt = s[i] / (s[i] - s[j])
    if tt < 0.0:
        tt = 0.0
    elif tt > 1.0:
        tt = 1.0
    for k in range(dim):
        dst[nd, slot, k] = src[t, i, k] + tt * (src[t, j, k] - src[t, i, k])


@njit(cache=True)
def _clip_tagged(src, stag, nsrc, dst, dtag, dim, axis, bound, keep_ge,
                 atol, s, order):
    """_clip_simplices with a sub-simplex tag carried through per piece.

    ``s`` and ``order`` are caller-owned scratch of length dim+1; this
    runs in the innermost loops, so it must not allocate.
    """
    nd = 0
    nv = dim + 1
    ncap = dst.shape[0]
    for t in range(nsrc):
        if nd + 3 > ncap:
            raise ValueError("clip buffer overflow")
        n_in = 0
        for i in range(nv):
            v = src[t, i, axis] - bound
            if not keep_ge:
                v = -v
            s[i] = v
            if v >= -atol:
                n_in += 1
        if n_in == nv:
            for i in range(nv):
                for k in range(dim):
                    dst[nd, i, k] = src[t, i, k]
            dtag[nd] = stag[t]
            nd += 1
            continue
        if n_in == 0:
            continue
        p = 0
        for i in range(nv):
            if s[i] >= -atol:
                order[p] = i
                p += 1
        for i in range(nv):
            if s[i] < -atol:
                order[p] = i
                p += 1
        if dim == 2:
            a, b, c = order[0], order[1], order[2]
            if n_in == 1:
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                _cut(src, t, a, b, s, dst, nd, 1, dim)
                _cut(src, t, a, c, s, dst, nd, 2, dim)
                dtag[nd] = stag[t]
                nd += 1
            else:
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                    dst[nd, 1, k] = src[t, b, k]
                _cut(src, t, b, c, s, dst, nd, 2, dim)
                dtag[nd] = stag[t]
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                    dst[nd, 1, k] = dst[nd - 1, 2, k]
                _cut(src, t, a, c, s, dst, nd, 2, dim)
                dtag[nd] = stag[t]
                nd += 1
        else:
            a, b, c, d = order[0], order[1], order[2], order[3]
            if n_in == 1:
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                _cut(src, t, a, b, s, dst, nd, 1, dim)
                _cut(src, t, a, c, s, dst, nd, 2, dim)
                _cut(src, t, a, d, s, dst, nd, 3, dim)
                dtag[nd] = stag[t]
                nd += 1
            elif n_in == 3:
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                    dst[nd, 1, k] = src[t, b, k]
                    dst[nd, 2, k] = src[t, c, k]
                _cut(src, t, a, d, s, dst, nd, 3, dim)
                dtag[nd] = stag[t]
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = src[t, b, k]
                    dst[nd, 1, k] = src[t, c, k]
                    dst[nd, 2, k] = dst[nd - 1, 3, k]
                _cut(src, t, b, d, s, dst, nd, 3, dim)
                dtag[nd] = stag[t]
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = src[t, c, k]
                    dst[nd, 1, k] = dst[nd - 2, 3, k]
                    dst[nd, 2, k] = dst[nd - 1, 3, k]
                _cut(src, t, c, d, s, dst, nd, 3, dim)
                dtag[nd] = stag[t]
                nd += 1
            else:
                for k in range(dim):
                    dst[nd, 0, k] = src[t, a, k]
                _cut(src, t, a, c, s, dst, nd, 1, dim)
                _cut(src, t, a, d, s, dst, nd, 2, dim)
                for k in range(dim):
                    dst[nd, 3, k] = src[t, b, k]
                dtag[nd] = stag[t]
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = dst[nd - 1, 1, k]
                    dst[nd, 1, k] = dst[nd - 1, 2, k]
                    dst[nd, 2, k] = src[t, b, k]
                _cut(src, t, b, c, s, dst, nd, 3, dim)
                dtag[nd] = stag[t]
                nd += 1
                for k in range(dim):
                    dst[nd, 0, k] = dst[nd - 2, 2, k]
                    dst[nd, 1, k] = src[t, b, k]
                    dst[nd, 2, k] = dst[nd - 1, 3, k]
                _cut(src, t, b, d, s, dst, nd, 3, dim)
                dtag[nd] = stag[t]
                nd += 1
    return nd


@njit(cache=True, inline="always")
def _piece_det(piece, dim):
    if dim == 2:
        a00 = piece[1, 0] - piece[0, 0]
        a01 = piece[1, 1] - piece[0, 1]
        a10 = piece[2, 0] - piece[0, 0]
        a11 = piece[2, 1] - piece[0, 1]
        return abs(a00 * a11 - a01 * a10)
    a = piece[1] - piece[0]
    b = piece[2] - piece[0]
    c = piece[3] - piece[0]
    det = (a[0] * (b[1] * c[2] - b[2] * c[1])
           - a[1] * (b[0] * c[2] - b[2] * c[0])
           + a[2] * (b[0] * c[1] - b[1] * c[0]))
    return abs(det)
