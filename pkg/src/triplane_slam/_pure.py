"""Vectorized numpy versions of the compiled kernels in ``_ext.pyx``.

Signatures and semantics match one-for-one; outputs are written into the
caller's buffers.
"""

from __future__ import annotations

import numpy as np

P2 = np.uint64(2654435761)
P3 = np.uint64(805459861)


def adam_update(values, grads, m, v, lr, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * grads * grads
    values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _idx2(ix, iy, n, dense, hsize):
    if dense:
        return iy * (n + 1) + ix
    h = ix.astype(np.uint64) ^ (iy.astype(np.uint64) * P2)
    return (h % np.uint64(hsize)).astype(np.int64)


def _idx3(ix, iy, iz, n, dense, hsize):
    if dense:
        return (iz * (n + 1) + iy) * (n + 1) + ix
    h = ix.astype(np.uint64) ^ (iy.astype(np.uint64) * P2) ^ (iz.astype(np.uint64) * P3)
    return (h % np.uint64(hsize)).astype(np.int64)


def _cell(x, n):
    return np.clip(np.floor(x).astype(np.int64), 0, n - 1)


def _level2(u, v, N):
    x, y = u * N, v * N
    ix, iy = _cell(x, N), _cell(y, N)
    return ix, iy, x - ix, y - iy


def hash2d_forward(uv, table, offsets, res, dense, hsize, out):
    n, P, _ = uv.shape
    C = table.shape[2]
    out[:] = 0.0
    for p in range(P):
        u = np.clip(uv[:, p, 0], 0.0, 1.0)
        v = np.clip(uv[:, p, 1], 0.0, 1.0)
        tab = table[p]
        for l, N in enumerate(res):
            ix, iy, fx, fy = _level2(u, v, N)
            off = offsets[l]
            acc = (((1 - fx) * (1 - fy))[:, None] * tab[off + _idx2(ix, iy, N, dense[l], hsize)]
                   + (fx * (1 - fy))[:, None] * tab[off + _idx2(ix + 1, iy, N, dense[l], hsize)]
                   + ((1 - fx) * fy)[:, None] * tab[off + _idx2(ix, iy + 1, N, dense[l], hsize)]
                   + (fx * fy)[:, None] * tab[off + _idx2(ix + 1, iy + 1, N, dense[l], hsize)])
            out[:, l * C:(l + 1) * C] += acc


def hash2d_backward(uv, table, offsets, res, dense, hsize, dout, table_grad, duv, want_table, want_uv):
    n, P, _ = uv.shape
    C = table.shape[2]
    for p in range(P):
        u_raw, v_raw = uv[:, p, 0], uv[:, p, 1]
        u = np.clip(u_raw, 0.0, 1.0)
        v = np.clip(v_raw, 0.0, 1.0)
        tab = table[p]
        gu = np.zeros(n)
        gv = np.zeros(n)
        for l, N in enumerate(res):
            ix, iy, fx, fy = _level2(u, v, N)
            off = offsets[l]
            i00 = off + _idx2(ix, iy, N, dense[l], hsize)
            i10 = off + _idx2(ix + 1, iy, N, dense[l], hsize)
            i01 = off + _idx2(ix, iy + 1, N, dense[l], hsize)
            i11 = off + _idx2(ix + 1, iy + 1, N, dense[l], hsize)
            g = dout[:, l * C:(l + 1) * C]
            if want_table:
                tg = table_grad[p]
                for idx, w in ((i00, (1 - fx) * (1 - fy)), (i10, fx * (1 - fy)),
                               (i01, (1 - fx) * fy), (i11, fx * fy)):
                    np.add.at(tg, idx, w[:, None] * g)
            if want_uv:
                t00, t10, t01, t11 = tab[i00], tab[i10], tab[i01], tab[i11]
                gu += N * np.sum(g * ((1 - fy)[:, None] * (t10 - t00) + fy[:, None] * (t11 - t01)), axis=1)
                gv += N * np.sum(g * ((1 - fx)[:, None] * (t01 - t00) + fx[:, None] * (t11 - t10)), axis=1)
        if want_uv:
            duv[:, p, 0] = np.where((u_raw >= 0) & (u_raw <= 1), gu, 0.0)
            duv[:, p, 1] = np.where((v_raw >= 0) & (v_raw <= 1), gv, 0.0)


def _corners3(pp, N):
    scaled = pp * N
    cell = _cell(scaled, N)
    f = scaled - cell
    return cell, f


def hash3d_forward(xyz, table, offsets, res, dense, hsize, out):
    C = table.shape[1]
    pp = np.clip(xyz, 0.0, 1.0)
    for l, N in enumerate(res):
        cell, f = _corners3(pp, N)
        acc = np.zeros((xyz.shape[0], C))
        for k in range(8):
            bits = [(k >> a) & 1 for a in range(3)]
            w = np.ones(xyz.shape[0])
            for a in range(3):
                w = w * (f[:, a] if bits[a] else 1 - f[:, a])
            idx = offsets[l] + _idx3(cell[:, 0] + bits[0], cell[:, 1] + bits[1], cell[:, 2] + bits[2],
                                     N, dense[l], hsize)
            acc += w[:, None] * table[idx]
        out[:, l * C:(l + 1) * C] = acc


def hash3d_backward(xyz, table, offsets, res, dense, hsize, dout, table_grad, dxyz, want_table, want_xyz):
    n = xyz.shape[0]
    C = table.shape[1]
    pp = np.clip(xyz, 0.0, 1.0)
    gp = np.zeros((n, 3))
    for l, N in enumerate(res):
        cell, f = _corners3(pp, N)
        g = dout[:, l * C:(l + 1) * C]
        for k in range(8):
            bits = [(k >> a) & 1 for a in range(3)]
            factors = [f[:, a] if bits[a] else 1 - f[:, a] for a in range(3)]
            w = factors[0] * factors[1] * factors[2]
            idx = offsets[l] + _idx3(cell[:, 0] + bits[0], cell[:, 1] + bits[1], cell[:, 2] + bits[2],
                                     N, dense[l], hsize)
            if want_table:
                np.add.at(table_grad, idx, w[:, None] * g)
            if want_xyz:
                proj = np.sum(g * table[idx], axis=1)
                for a in range(3):
                    sign = 1.0 if bits[a] else -1.0
                    others = np.ones(n)
                    for b in range(3):
                        if b != a:
                            others = others * factors[b]
                    gp[:, a] += N * sign * others * proj
    if want_xyz:
        dxyz[:] = np.where((xyz >= 0) & (xyz <= 1), gp, 0.0)
