"""Gain-nest template, specialized per kernel product.

numba cannot persist a disk cache for functions that receive other
compiled functions as arguments, and the gain nest is far too slow to
recompile in every process.  assembly therefore renders this file with
the β·Γ product baked into ``_bg`` as a module global, writes the copy
into a cache directory and imports it from there; ``cache=True`` then
works and each kernel product compiles once per machine, not once per
process.

Do not import this module directly: ``_bg`` below is a placeholder.
The heavy lifting shared by all kernel products (panel construction,
tagged simplex clipping) lives in ``_gain_kernels``.
"""

from math import exp  # noqa: F401  (kernel expressions may call exp)

import numpy as np
from numba import njit, prange

from fragfem._gain_kernels import (
    LOCAL_ATOL,
    _build_edges,
    _clip_tagged,
    _piece_det,
    _shape_values,
)

_JIT = dict(cache=True, error_model="numpy", fastmath=False)


@njit(inline="always", **_JIT)
def _bg(x1, x2, x3, y1, y2, y3):
    return 0.0  # __BG_EXPR__


@njit(parallel=True, **_JIT)
def _fill_gwtab(verts, detJ, iq_pts, iq_w, dim, gwtab):
    """β·Γ at every full-cell inner point, premultiplied by weight and
    Jacobian.  Only consulted for x-independent kernel products; the
    x slots are fed zeros."""
    nel = verts.shape[0]
    nqi = iq_pts.shape[0]
    for e in prange(nel):
        y = np.zeros(3)
        for q in range(nqi):
            for k in range(dim):
                yk = verts[e, 0, k]
                for mm in range(dim):
                    yk += iq_pts[q, mm] * (verts[e, mm + 1, k]
                                           - verts[e, 0, k])
                y[k] = yk
            gwtab[e, q] = (_bg(0.0, 0.0, 0.0, y[0], y[1], y[2])
                           * detJ[e] * iq_w[q])


@njit(inline="always", **_JIT)
def _piece_quad(piece, tag, cell_lin, nsimp, a0, s0, a1, s1, a2, s2,
                dim, x1, x2, x3, cellvol,
                einv, v0, exponents, coeffs, iq_pts, iq_w,
                eldofs, gvec, y, xi, lam, shp):
    """Quadrature of βΓφ over one clipped piece given in cell-local coords."""
    det = _piece_det(piece, dim)
    if det == 0.0:
        return
    nqi = iq_pts.shape[0]
    nloc = shp.shape[0]
    eid = cell_lin * nsimp + tag
    w_geo = det * cellvol
    for q in range(nqi):
        for k in range(dim):
            zk = piece[0, k]
            for mm in range(dim):
                zk += iq_pts[q, mm] * (piece[mm + 1, k] - piece[0, k])
            xi[k] = zk
        y[0] = a0 + xi[0] * s0
        y[1] = a1 + xi[1] * s1
        if dim == 3:
            y[2] = a2 + xi[2] * s2
        for k in range(dim):
            lk = 0.0
            for mm in range(dim):
                lk += einv[tag, k, mm] * (xi[mm] - v0[tag, mm])
            lam[k] = lk
        _shape_values(lam, exponents, coeffs, shp)
        if dim == 2:
            val = _bg(x1, x2, 0.0, y[0], y[1], 0.0)
        else:
            val = _bg(x1, x2, x3, y[0], y[1], y[2])
        w = iq_w[q] * w_geo * val
        for l in range(nloc):
            gvec[eldofs[eid, l]] += w * shp[l]


@njit(**_JIT)
def _full_cell_quad(cell_lin, nsimp, dim, x1, x2, x3, x_free,
                    verts, detJ, eldofs, iq_pts, iq_w, phi_in, gwtab,
                    gvec, y):
    """Fast path: whole cell, basis kinks aligned, tabulated shapes.

    For x-independent kernel products the inner point values come from
    gwtab, turning the box into a tiny dot product per dof."""
    nqi = iq_pts.shape[0]
    nloc = phi_in.shape[1]
    for s in range(nsimp):
        eid = cell_lin * nsimp + s
        if x_free:
            for l in range(nloc):
                acc = 0.0
                for q in range(nqi):
                    acc += gwtab[eid, q] * phi_in[q, l]
                gvec[eldofs[eid, l]] += acc
        else:
            dj = detJ[eid]
            for q in range(nqi):
                for k in range(dim):
                    yk = verts[eid, 0, k]
                    for mm in range(dim):
                        yk += iq_pts[q, mm] * (verts[eid, mm + 1, k]
                                               - verts[eid, 0, k])
                    y[k] = yk
                if dim == 2:
                    val = _bg(x1, x2, 0.0, y[0], y[1], 0.0)
                else:
                    val = _bg(x1, x2, x3, y[0], y[1], y[2])
                w = iq_w[q] * dj * val
                for l in range(nloc):
                    gvec[eldofs[eid, l]] += w * phi_in[q, l]


@njit(**_JIT)
def _inner_gain(x, dim, nsimp, lines, nlines, strides, ref_corners,
                verts, detJ, eldofs,
                einv, v0,
                exponents, coeffs,
                iq_pts, iq_w, phi_in, gwtab, x_free,
                cap, maxe, maxt, gvec):
    """Inner integral vector over [x, upper]: gvec[i] = ∫ βΓ φ_i dy.

    Panel boxes are visited as nested per-axis slabs; the sub-simplex
    clipping happens in cell-local coordinates (identical for every
    cell), so the axis-0 and axis-1 clips are computed once per slab
    and reused across the whole inner sweep.
    """
    ndof = gvec.shape[0]
    nloc = phi_in.shape[1]
    for i in range(ndof):
        gvec[i] = 0.0
    edges = np.empty((3, maxe + 1))
    cells = np.empty((3, maxe), dtype=np.int64)
    lo_d = np.empty((3, maxe), dtype=np.bool_)
    hi_d = np.empty((3, maxe), dtype=np.bool_)
    nint = np.zeros(3, dtype=np.int64)
    for k in range(dim):
        nint[k] = _build_edges(lines[k], nlines[k], x[k], cap,
                               edges[k], cells[k], lo_d[k], hi_d[k])
        if nint[k] == 0:
            return
    p0 = np.empty((maxt, dim + 1, dim))
    t0 = np.empty(maxt, dtype=np.int64)
    p1 = np.empty((maxt, dim + 1, dim))
    t1 = np.empty(maxt, dtype=np.int64)
    pw = np.empty((maxt, dim + 1, dim))
    tw = np.empty(maxt, dtype=np.int64)
    pz = np.empty((3 * maxt, dim + 1, dim))
    tz = np.empty(3 * maxt, dtype=np.int64)
    pz2 = np.empty((3 * maxt, dim + 1, dim))
    tz2 = np.empty(3 * maxt, dtype=np.int64)
    tref = np.empty(nsimp, dtype=np.int64)
    for p in range(nsimp):
        tref[p] = p
    sc = np.empty(dim + 1)
    oc = np.empty(dim + 1, dtype=np.int64)
    y = np.empty(3)
    xi = np.empty(dim)
    lam = np.empty(dim)
    shp = np.empty(nloc)
    x1 = x[0]
    x2 = x[1]
    x3 = x[2] if dim == 3 else 0.0
    a2 = 0.0
    s2 = 1.0
    for m0 in range(nint[0]):
        c0 = cells[0, m0]
        a0 = lines[0][c0]
        s0 = lines[0][c0 + 1] - a0
        d0l = lo_d[0, m0]
        d0h = hi_d[0, m0]
        if d0l and d0h:
            n0 = _clip_tagged(ref_corners, tref, nsimp, pw, tw, dim, 0,
                              (edges[0, m0] - a0) / s0, True,
                              LOCAL_ATOL, sc, oc)
            n0 = _clip_tagged(pw, tw, n0, p0, t0, dim, 0,
                              (edges[0, m0 + 1] - a0) / s0, False,
                              LOCAL_ATOL, sc, oc)
            ps0, ts0 = p0, t0
        elif d0l:
            n0 = _clip_tagged(ref_corners, tref, nsimp, p0, t0, dim, 0,
                              (edges[0, m0] - a0) / s0, True,
                              LOCAL_ATOL, sc, oc)
            ps0, ts0 = p0, t0
        elif d0h:
            n0 = _clip_tagged(ref_corners, tref, nsimp, p0, t0, dim, 0,
                              (edges[0, m0 + 1] - a0) / s0, False,
                              LOCAL_ATOL, sc, oc)
            ps0, ts0 = p0, t0
        else:
            n0 = nsimp
            ps0, ts0 = ref_corners, tref
        if n0 == 0:
            continue
        base0 = c0 * strides[0]
        for m1 in range(nint[1]):
            c1 = cells[1, m1]
            a1 = lines[1][c1]
            s1 = lines[1][c1 + 1] - a1
            d1l = lo_d[1, m1]
            d1h = hi_d[1, m1]
            if d1l and d1h:
                n1 = _clip_tagged(ps0, ts0, n0, pw, tw, dim, 1,
                                  (edges[1, m1] - a1) / s1, True,
                                  LOCAL_ATOL, sc, oc)
                n1 = _clip_tagged(pw, tw, n1, p1, t1, dim, 1,
                                  (edges[1, m1 + 1] - a1) / s1, False,
                                  LOCAL_ATOL, sc, oc)
                ps1, ts1 = p1, t1
            elif d1l:
                n1 = _clip_tagged(ps0, ts0, n0, p1, t1, dim, 1,
                                  (edges[1, m1] - a1) / s1, True,
                                  LOCAL_ATOL, sc, oc)
                ps1, ts1 = p1, t1
            elif d1h:
                n1 = _clip_tagged(ps0, ts0, n0, p1, t1, dim, 1,
                                  (edges[1, m1 + 1] - a1) / s1, False,
                                  LOCAL_ATOL, sc, oc)
                ps1, ts1 = p1, t1
            else:
                n1 = n0
                ps1, ts1 = ps0, ts0
            if n1 == 0:
                continue
            base1 = base0 + c1 * strides[1]
            flat01 = d0l or d0h or d1l or d1h
            if dim == 2:
                if not flat01:
                    _full_cell_quad(base1, nsimp, dim, x1, x2, x3, x_free,
                                    verts, detJ, eldofs,
                                    iq_pts, iq_w, phi_in, gwtab, gvec, y)
                else:
                    cellvol = s0 * s1
                    for p in range(n1):
                        _piece_quad(ps1[p], ts1[p], base1, nsimp,
                                    a0, s0, a1, s1, a2, s2,
                                    dim, x1, x2, x3, cellvol,
                                    einv, v0, exponents, coeffs,
                                    iq_pts, iq_w, eldofs, gvec,
                                    y, xi, lam, shp)
                continue
            for m2 in range(nint[2]):
                c2 = cells[2, m2]
                a2 = lines[2][c2]
                s2 = lines[2][c2 + 1] - a2
                d2l = lo_d[2, m2]
                d2h = hi_d[2, m2]
                cell_lin = base1 + c2 * strides[2]
                if not (flat01 or d2l or d2h):
                    _full_cell_quad(cell_lin, nsimp, dim, x1, x2, x3, x_free,
                                    verts, detJ, eldofs,
                                    iq_pts, iq_w, phi_in, gwtab, gvec, y)
                    continue
                cur, ct, n2 = ps1, ts1, n1
                if d2l:
                    n2 = _clip_tagged(cur, ct, n2, pz, tz, dim, 2,
                                      (edges[2, m2] - a2) / s2, True,
                                      LOCAL_ATOL, sc, oc)
                    cur, ct = pz, tz
                if n2 > 0 and d2h:
                    n2 = _clip_tagged(cur, ct, n2, pz2, tz2, dim, 2,
                                      (edges[2, m2 + 1] - a2) / s2, False,
                                      LOCAL_ATOL, sc, oc)
                    cur, ct = pz2, tz2
                cellvol = s0 * s1 * s2
                for p in range(n2):
                    _piece_quad(cur[p], ct[p], cell_lin, nsimp,
                                a0, s0, a1, s1, a2, s2,
                                dim, x1, x2, x3, cellvol,
                                einv, v0, exponents, coeffs,
                                iq_pts, iq_w, eldofs, gvec,
                                y, xi, lam, shp)


@njit(parallel=True, **_JIT)
def _gain_chunk(dim, nsimp, lines, nlines, strides, ref_corners,
                verts, detJ, eldofs,
                einv, v0,
                exponents, coeffs,
                oq_pts, oq_w, phi_out,
                iq_pts, iq_w, phi_in, gwtab, x_free,
                cap, maxe, maxt,
                e_start, blocks):
    """Per-element row blocks for elements e_start .. e_start+len(blocks).

    blocks[c, j, i] accumulates the rows of element e_start+c; the
    caller merges chunks serially in element order, which keeps the
    result identical for every thread count.
    """
    nchunk = blocks.shape[0]
    nloc = blocks.shape[1]
    ndof = blocks.shape[2]
    nqo = oq_pts.shape[0]
    for c in prange(nchunk):
        e = e_start + c
        gvec = np.empty(ndof)
        x = np.empty(dim)
        for q in range(nqo):
            for k in range(dim):
                xk = verts[e, 0, k]
                for mm in range(dim):
                    xk += oq_pts[q, mm] * (verts[e, mm + 1, k]
                                           - verts[e, 0, k])
                x[k] = xk
            _inner_gain(x, dim, nsimp, lines, nlines, strides, ref_corners,
                        verts, detJ, eldofs, einv, v0,
                        exponents, coeffs, iq_pts, iq_w, phi_in,
                        gwtab, x_free, cap, maxe, maxt, gvec)
            w_out = oq_w[q] * detJ[e]
            for j in range(nloc):
                wj = w_out * phi_out[q, j]
                if wj == 0.0:
                    continue
                row = blocks[c, j]
                for i in range(ndof):
                    row[i] += wj * gvec[i]
