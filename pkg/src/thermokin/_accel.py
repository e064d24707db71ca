"""Compiled inner loops for the collision operator and interpolation.

The discrete bilinear collision sum runs over (v, v*, angle).  Two structural
facts keep this affordable on a uniform lattice:

* the pre/post-collision geometry depends only on u = v* - v and the angle,
  never on v itself, so the 8-point interpolation stencils (integer base
  offset + trilinear weights) can be tabulated once per (u, angle) and reused
  for every output node v;

* fields are zero-extended outside the box, which a zero-padded copy of the
  field realizes with no bounds checks in the gather loops.

Angle direction is parametrized in the frame of u: omega = c*uhat +
sqrt(1-c^2)(cos(phi) e1 + sin(phi) e2), so v' = v + c^2 u + c s (cos(phi) E1 +
sin(phi) E2) with E_i = |u| e_i, and v*' = v + u - (v' - v).  Both |v'-v| and
|v*'-v| are bounded by |u|, which bounds the padding width.

Everything is deterministic at any thread count: parallel loops are over
output rows only and each row accumulates in a fixed sequential order.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True)
def _stencil(dx: float, dy: float, dz: float, h: float, npad: int):
    """Trilinear stencil for an offset (dx,dy,dz) from an arbitrary lattice
    node: integer base offset (bi,bj,bk), 8 flat padded-array offsets, and
    8 weights, corner order s = 4*si + 2*sj + sk."""
    tx = dx / h
    ty = dy / h
    tz = dz / h
    bi = int(np.floor(tx))
    bj = int(np.floor(ty))
    bk = int(np.floor(tz))
    fx = tx - bi
    fy = ty - bj
    fz = tz - bk
    offs = np.empty(8, dtype=np.int32)
    wts = np.empty(8, dtype=np.float64)
    m = 0
    for si in range(2):
        wx = fx if si == 1 else 1.0 - fx
        for sj in range(2):
            wy = fy if sj == 1 else 1.0 - fy
            for sk in range(2):
                wz = fz if sk == 1 else 1.0 - fz
                offs[m] = (bi + si) * npad * npad + (bj + sj) * npad + (bk + sk)
                wts[m] = wx * wy * wz
                m += 1
    return bi, bj, bk, offs, wts


@njit(cache=True, parallel=True)
def build_tables(n, h, npad, gamma, ca, sa, cphi, sphi,
                 off1, wt1, off2, wt2, base1, base2, u_padoff, u_gam):
    """Fill the per-(u, angle) interpolation tables.

    u ranges over the difference lattice du in [-(n-1), n-1]^3, flat index
    lexicographic in (du_i + n - 1).  For each angle a the table holds the
    trilinear stencil of the v*'-side point (off1/wt1, base1) and of the
    v'-side point (off2/wt2, base2); offsets are relative to the padded flat
    index of v.  u_padoff is the padded flat offset of v+u; u_gam = |u|^gamma
    (with 0^0 = 1 so Maxwell-molecule self-pairs keep the loss/gain balance).
    """
    nu_axis = 2 * n - 1
    n_ang = ca.shape[0]
    for uf in prange(nu_axis ** 3):
        di = uf // (nu_axis * nu_axis) - (n - 1)
        dj = (uf // nu_axis) % nu_axis - (n - 1)
        dk = uf % nu_axis - (n - 1)
        ux = di * h
        uy = dj * h
        uz = dk * h
        u2 = ux * ux + uy * uy + uz * uz
        unorm = np.sqrt(u2)
        u_padoff[uf] = di * npad * npad + dj * npad + dk
        if unorm == 0.0:
            # 0^0 = 1 keeps the Maxwell-molecule self-pair exactly balanced
            # between gain and loss; for gamma > 0 the kernel vanishes at u=0.
            u_gam[uf] = 1.0 if gamma == 0.0 else 0.0
        elif gamma == 0.0:
            u_gam[uf] = 1.0
        elif gamma == 1.0:
            u_gam[uf] = unorm
        else:
            u_gam[uf] = unorm ** gamma
        if unorm == 0.0:
            # self pair: v' = v*' = v for every angle
            for a in range(n_ang):
                for m in range(8):
                    off1[uf, a, m] = 0
                    off2[uf, a, m] = 0
                    wt1[uf, a, m] = 1.0 if m == 0 else 0.0
                    wt2[uf, a, m] = 1.0 if m == 0 else 0.0
                base1[uf, a, 0] = 0
                base1[uf, a, 1] = 0
                base1[uf, a, 2] = 0
                base2[uf, a, 0] = 0
                base2[uf, a, 1] = 0
                base2[uf, a, 2] = 0
            continue
        # orthonormal frame (e1, e2) perpendicular to uhat
        hx = ux / unorm
        hy = uy / unorm
        hz = uz / unorm
        axh = abs(hx)
        ayh = abs(hy)
        azh = abs(hz)
        # cross uhat with the axis of its smallest component
        if axh <= ayh and axh <= azh:
            e1x, e1y, e1z = 0.0, hz, -hy
        elif ayh <= azh:
            e1x, e1y, e1z = -hz, 0.0, hx
        else:
            e1x, e1y, e1z = hy, -hx, 0.0
        en = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
        e1x /= en
        e1y /= en
        e1z /= en
        e2x = hy * e1z - hz * e1y
        e2y = hz * e1x - hx * e1z
        e2z = hx * e1y - hy * e1x
        for a in range(n_ang):
            c = ca[a]
            s = sa[a]
            cp = cphi[a]
            sp = sphi[a]
            # displacement of the v'-side point from v
            px = c * c * ux + c * s * unorm * (cp * e1x + sp * e2x)
            py = c * c * uy + c * s * unorm * (cp * e1y + sp * e2y)
            pz = c * c * uz + c * s * unorm * (cp * e1z + sp * e2z)
            bi, bj, bk, offs, wts = _stencil(ux - px, uy - py, uz - pz, h, npad)
            for m in range(8):
                off1[uf, a, m] = offs[m]
                wt1[uf, a, m] = wts[m]
            base1[uf, a, 0] = bi
            base1[uf, a, 1] = bj
            base1[uf, a, 2] = bk
            bi, bj, bk, offs, wts = _stencil(px, py, pz, h, npad)
            for m in range(8):
                off2[uf, a, m] = offs[m]
                wt2[uf, a, m] = wts[m]
            base2[uf, a, 0] = bi
            base2[uf, a, 1] = bj
            base2[uf, a, 2] = bk


@njit(cache=True, parallel=True)
def gain_kernel(n, npad, pad_margin, p1pad, p2pad, wxpad,
                off1, wt1, off2, wt2, u_padoff, u_gam, wb0, out):
    """gain(v) = sum_u wx(v+u) |u|^gamma sum_a wb0_a P1~(v*') P2~(v').

    p1pad/p2pad are zero-padded field arrays (the raw fields in literal mode,
    the F/mu ratio fields in mu-ratio mode, where wxpad then carries w*mu and
    the caller scales the output row by mu(v)).
    """
    nu = u_padoff.shape[0]
    n_ang = wb0.shape[0]
    for vf in prange(n ** 3):
        i = vf // (n * n)
        j = (vf // n) % n
        k = vf % n
        vp = (i + pad_margin) * npad * npad + (j + pad_margin) * npad + (k + pad_margin)
        acc = 0.0
        for uf in range(nu):
            wx = wxpad[vp + u_padoff[uf]]
            if wx == 0.0:
                continue
            acc_u = 0.0
            for a in range(n_ang):
                t1 = 0.0
                t2 = 0.0
                for m in range(8):
                    t1 += wt1[uf, a, m] * p1pad[vp + off1[uf, a, m]]
                    t2 += wt2[uf, a, m] * p2pad[vp + off2[uf, a, m]]
                acc_u += wb0[a] * t1 * t2
            acc += wx * u_gam[uf] * acc_u
        out[vf] = acc


@njit(cache=True, parallel=True)
def lossint_kernel(n, npad, pad_margin, p1pad, wxpad, u_padoff, u_gam, out):
    """out(v) = sum_u wx(v+u) |u|^gamma P1(v+u)  (angular factor applied by caller)."""
    nu = u_padoff.shape[0]
    for vf in prange(n ** 3):
        i = vf // (n * n)
        j = (vf // n) % n
        k = vf % n
        vp = (i + pad_margin) * npad * npad + (j + pad_margin) * npad + (k + pad_margin)
        acc = 0.0
        for uf in range(nu):
            wx = wxpad[vp + u_padoff[uf]]
            if wx == 0.0:
                continue
            acc += wx * u_gam[uf] * p1pad[vp + u_padoff[uf]]
        out[vf] = acc


@njit(cache=True, parallel=True)
def assemble_core_kernel(n, wmupad, npad, pad_margin,
                         base1, wt1, base2, wt2, u_padoff, u_gam, wb0,
                         sb0, core):
    """Dense assembly of the mu-ratio collision core.

    core[v, c] collects sum_u (w mu)(v+u) |u|^gamma { sum_a wb0_a [stencil
    weights of both post-collision points] - S_B0 delta_{c, v+u} }, so that
    Q(d, mu) + Q(mu, d) = D_mu core D_{1/mu} d - nu d for any field d.
    Columns falling outside the box are dropped (zero extension of the ratio
    field).  Rows are written in parallel; each row is private to its
    iteration.
    """
    nu_axis = 2 * n - 1
    nu = u_padoff.shape[0]
    n_ang = wb0.shape[0]
    for vf in prange(n ** 3):
        i = vf // (n * n)
        j = (vf // n) % n
        k = vf % n
        vp = (i + pad_margin) * npad * npad + (j + pad_margin) * npad + (k + pad_margin)
        for uf in range(nu):
            wx = wmupad[vp + u_padoff[uf]]
            if wx == 0.0:
                continue
            wg = wx * u_gam[uf]
            di = uf // (nu_axis * nu_axis) - (n - 1)
            dj = (uf // nu_axis) % nu_axis - (n - 1)
            dk = uf % nu_axis - (n - 1)
            for a in range(n_ang):
                cf = wg * wb0[a]
                for m in range(8):
                    si = (m >> 2) & 1
                    sj = (m >> 1) & 1
                    sk = m & 1
                    ci = i + base1[uf, a, 0] + si
                    cj = j + base1[uf, a, 1] + sj
                    ck = k + base1[uf, a, 2] + sk
                    if 0 <= ci < n and 0 <= cj < n and 0 <= ck < n:
                        core[vf, ci * n * n + cj * n + ck] += cf * wt1[uf, a, m]
                    ci = i + base2[uf, a, 0] + si
                    cj = j + base2[uf, a, 1] + sj
                    ck = k + base2[uf, a, 2] + sk
                    if 0 <= ci < n and 0 <= cj < n and 0 <= ck < n:
                        core[vf, ci * n * n + cj * n + ck] += cf * wt2[uf, a, m]
            # loss column at v* = v+u (inside the box whenever wx != 0)
            core[vf, (i + di) * n * n + (j + dj) * n + (k + dk)] -= wg * sb0


@njit(cache=True)
def _cubic_weights(s: float, w: np.ndarray) -> None:
    """4-point Lagrange weights at offsets (-1, 0, 1, 2) for fraction s in [0,1]."""
    w[0] = -s * (s - 1.0) * (s - 2.0) / 6.0
    w[1] = (s * s - 1.0) * (s - 2.0) / 2.0
    w[2] = -s * (s + 1.0) * (s - 2.0) / 2.0
    w[3] = s * (s * s - 1.0) / 6.0


@njit(cache=True, parallel=True)
def map_interp_kernel(n, h, half, fpad, npad, pad_margin, tmat, cubic, out):
    """out(v) = Interp(f)(T v) for all lattice nodes v, zero outside the box.

    half = (n-1)/2 so that node coordinates are (i - half)*h.  cubic selects
    tricubic Lagrange (pad_margin must be >= 2) versus trilinear.
    """
    for vf in prange(n ** 3):
        i = vf // (n * n)
        j = (vf // n) % n
        k = vf % n
        vx = (i - half) * h
        vy = (j - half) * h
        vz = (k - half) * h
        yx = tmat[0, 0] * vx + tmat[0, 1] * vy + tmat[0, 2] * vz
        yy = tmat[1, 0] * vx + tmat[1, 1] * vy + tmat[1, 2] * vz
        yz = tmat[2, 0] * vx + tmat[2, 1] * vy + tmat[2, 2] * vz
        tx = yx / h + half
        ty = yy / h + half
        tz = yz / h + half
        bi = int(np.floor(tx))
        bj = int(np.floor(ty))
        bk = int(np.floor(tz))
        fx = tx - bi
        fy = ty - bj
        fz = tz - bk
        if cubic:
            # guard: stay inside the padded array
            if bi < -pad_margin + 1 or bi > n + pad_margin - 3 or \
               bj < -pad_margin + 1 or bj > n + pad_margin - 3 or \
               bk < -pad_margin + 1 or bk > n + pad_margin - 3:
                out[vf] = 0.0
                continue
            wx = np.empty(4)
            wy = np.empty(4)
            wz = np.empty(4)
            _cubic_weights(fx, wx)
            _cubic_weights(fy, wy)
            _cubic_weights(fz, wz)
            acc = 0.0
            for si in range(4):
                ii = (bi + si - 1 + pad_margin) * npad * npad
                for sj in range(4):
                    jj = (bj + sj - 1 + pad_margin) * npad
                    part = 0.0
                    for sk in range(4):
                        part += wz[sk] * fpad[ii + jj + bk + sk - 1 + pad_margin]
                    acc += wx[si] * wy[sj] * part
            out[vf] = acc
        else:
            if bi < -pad_margin or bi > n + pad_margin - 2 or \
               bj < -pad_margin or bj > n + pad_margin - 2 or \
               bk < -pad_margin or bk > n + pad_margin - 2:
                out[vf] = 0.0
                continue
            acc = 0.0
            for si in range(2):
                wxs = fx if si == 1 else 1.0 - fx
                ii = (bi + si + pad_margin) * npad * npad
                for sj in range(2):
                    wys = fy if sj == 1 else 1.0 - fy
                    jj = (bj + sj + pad_margin) * npad
                    for sk in range(2):
                        wzs = fz if sk == 1 else 1.0 - fz
                        acc += wxs * wys * wzs * fpad[ii + jj + bk + sk + pad_margin]
            out[vf] = acc
