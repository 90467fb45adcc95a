# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: hash-grid interpolation forward/backward and Adam."""

from libc.math cimport sqrt, floor

ctypedef unsigned long long u64

cdef u64 P2 = 2654435761ULL
cdef u64 P3 = 805459861ULL


cdef inline Py_ssize_t _idx2(int ix, int iy, int n, bint dense, u64 hsize) nogil:
    if dense:
        return iy * (n + 1) + ix
    return <Py_ssize_t>((<u64>ix ^ (<u64>iy * P2)) % hsize)


cdef inline Py_ssize_t _idx3(int ix, int iy, int iz, int n, bint dense, u64 hsize) nogil:
    if dense:
        return (iz * (n + 1) + iy) * (n + 1) + ix
    return <Py_ssize_t>((<u64>ix ^ (<u64>iy * P2) ^ (<u64>iz * P3)) % hsize)


cdef inline double _clamp01(double x) nogil:
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


cdef inline int _cell(double x, int n) nogil:
    cdef int i = <int>floor(x)
    if i >= n:
        i = n - 1
    if i < 0:
        i = 0
    return i


def adam_update(double[::1] values, double[::1] grads, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double eps, double bc1, double bc2):
    cdef Py_ssize_t i, n = values.shape[0]
    cdef double g, mh, vh
    with nogil:
        for i in range(n):
            g = grads[i]
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * g * g
            mh = m[i] / bc1
            vh = v[i] / bc2
            values[i] -= lr * mh / (sqrt(vh) + eps)


def hash2d_forward(const double[:, :, ::1] uv, const double[:, :, ::1] table,
                   const long[::1] offsets, const long[::1] res, const unsigned char[::1] dense,
                   long hsize, double[:, ::1] out):
    """Bilinear lookup summed over planes. uv: (n, P, 2); table: (P, T, C); out: (n, L*C)."""
    cdef Py_ssize_t n = uv.shape[0], P = uv.shape[1], C = table.shape[2], L = res.shape[0]
    cdef Py_ssize_t i, p, l, c, i00, i10, i01, i11, off
    cdef double u, v, x, y, fx, fy, w00, w10, w01, w11
    cdef int ix, iy, N
    cdef bint dn
    cdef u64 hs = <u64>hsize
    cdef const double *t00
    cdef const double *t10
    cdef const double *t01
    cdef const double *t11
    cdef double *o
    with nogil:
        for i in range(n):
            for c in range(L * C):
                out[i, c] = 0.0
            for p in range(P):
                u = _clamp01(uv[i, p, 0])
                v = _clamp01(uv[i, p, 1])
                for l in range(L):
                    N = res[l]
                    dn = dense[l]
                    off = offsets[l]
                    x = u * N
                    y = v * N
                    ix = _cell(x, N)
                    iy = _cell(y, N)
                    fx = x - ix
                    fy = y - iy
                    w00 = (1 - fx) * (1 - fy)
                    w10 = fx * (1 - fy)
                    w01 = (1 - fx) * fy
                    w11 = fx * fy
                    t00 = &table[p, off + _idx2(ix, iy, N, dn, hs), 0]
                    t10 = &table[p, off + _idx2(ix + 1, iy, N, dn, hs), 0]
                    t01 = &table[p, off + _idx2(ix, iy + 1, N, dn, hs), 0]
                    t11 = &table[p, off + _idx2(ix + 1, iy + 1, N, dn, hs), 0]
                    o = &out[i, l * C]
                    for c in range(C):
                        o[c] += w00 * t00[c] + w10 * t10[c] + w01 * t01[c] + w11 * t11[c]


def hash2d_backward(const double[:, :, ::1] uv, const double[:, :, ::1] table,
                    const long[::1] offsets, const long[::1] res, const unsigned char[::1] dense,
                    long hsize, const double[:, ::1] dout,
                    double[:, :, ::1] table_grad, double[:, :, ::1] duv,
                    bint want_table, bint want_uv):
    """Scatter ``dout`` into ``table_grad`` and/or gather d/d(uv) into ``duv``."""
    cdef Py_ssize_t n = uv.shape[0], P = uv.shape[1], C = table.shape[2], L = res.shape[0]
    cdef Py_ssize_t i, p, l, c, i00, i10, i01, i11, off
    cdef double u, v, x, y, fx, fy, w00, w10, w01, w11, g, gu, gv, su, sv
    cdef int ix, iy, N
    cdef bint dn, in_u, in_v
    cdef u64 hs = <u64>hsize
    cdef const double *go
    cdef const double *t00
    cdef const double *t10
    cdef const double *t01
    cdef const double *t11
    cdef double *g00
    cdef double *g10
    cdef double *g01
    cdef double *g11
    with nogil:
        for i in range(n):
            for p in range(P):
                u = uv[i, p, 0]
                v = uv[i, p, 1]
                in_u = 0.0 <= u <= 1.0
                in_v = 0.0 <= v <= 1.0
                u = _clamp01(u)
                v = _clamp01(v)
                gu = 0.0
                gv = 0.0
                for l in range(L):
                    N = res[l]
                    dn = dense[l]
                    off = offsets[l]
                    x = u * N
                    y = v * N
                    ix = _cell(x, N)
                    iy = _cell(y, N)
                    fx = x - ix
                    fy = y - iy
                    i00 = off + _idx2(ix, iy, N, dn, hs)
                    i10 = off + _idx2(ix + 1, iy, N, dn, hs)
                    i01 = off + _idx2(ix, iy + 1, N, dn, hs)
                    i11 = off + _idx2(ix + 1, iy + 1, N, dn, hs)
                    go = &dout[i, l * C]
                    if want_table:
                        w00 = (1 - fx) * (1 - fy)
                        w10 = fx * (1 - fy)
                        w01 = (1 - fx) * fy
                        w11 = fx * fy
                        g00 = &table_grad[p, i00, 0]
                        g10 = &table_grad[p, i10, 0]
                        g01 = &table_grad[p, i01, 0]
                        g11 = &table_grad[p, i11, 0]
                        for c in range(C):
                            g = go[c]
                            g00[c] += w00 * g
                            g10[c] += w10 * g
                            g01[c] += w01 * g
                            g11[c] += w11 * g
                    if want_uv:
                        t00 = &table[p, i00, 0]
                        t10 = &table[p, i10, 0]
                        t01 = &table[p, i01, 0]
                        t11 = &table[p, i11, 0]
                        su = 0.0
                        sv = 0.0
                        for c in range(C):
                            g = go[c]
                            su += g * ((1 - fy) * (t10[c] - t00[c]) + fy * (t11[c] - t01[c]))
                            sv += g * ((1 - fx) * (t01[c] - t00[c]) + fx * (t11[c] - t10[c]))
                        gu += N * su
                        gv += N * sv
                if want_uv:
                    duv[i, p, 0] = gu if in_u else 0.0
                    duv[i, p, 1] = gv if in_v else 0.0


def hash3d_forward(const double[:, ::1] xyz, const double[:, ::1] table,
                   const long[::1] offsets, const long[::1] res, const unsigned char[::1] dense,
                   long hsize, double[:, ::1] out):
    """Trilinear lookup. xyz: (n, 3) in [0, 1]; table: (T, C); out: (n, L*C)."""
    cdef Py_ssize_t n = xyz.shape[0], C = table.shape[1], L = res.shape[0]
    cdef Py_ssize_t i, l, c, k, off
    cdef Py_ssize_t idx[8]
    cdef double w[8]
    cdef double p0, p1, p2, x, y, z, fx, fy, fz, acc
    cdef int ix, iy, iz, N, dx, dy, dz
    cdef bint dn
    cdef u64 hs = <u64>hsize
    with nogil:
        for i in range(n):
            p0 = _clamp01(xyz[i, 0])
            p1 = _clamp01(xyz[i, 1])
            p2 = _clamp01(xyz[i, 2])
            for l in range(L):
                N = res[l]
                dn = dense[l]
                off = offsets[l]
                x = p0 * N
                y = p1 * N
                z = p2 * N
                ix = _cell(x, N)
                iy = _cell(y, N)
                iz = _cell(z, N)
                fx = x - ix
                fy = y - iy
                fz = z - iz
                for k in range(8):
                    dx = k & 1
                    dy = (k >> 1) & 1
                    dz = (k >> 2) & 1
                    w[k] = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                    idx[k] = off + _idx3(ix + dx, iy + dy, iz + dz, N, dn, hs)
                for c in range(C):
                    acc = 0.0
                    for k in range(8):
                        acc += w[k] * table[idx[k], c]
                    out[i, l * C + c] = acc


def hash3d_backward(const double[:, ::1] xyz, const double[:, ::1] table,
                    const long[::1] offsets, const long[::1] res, const unsigned char[::1] dense,
                    long hsize, const double[:, ::1] dout,
                    double[:, ::1] table_grad, double[:, ::1] dxyz,
                    bint want_table, bint want_xyz):
    cdef Py_ssize_t n = xyz.shape[0], C = table.shape[1], L = res.shape[0]
    cdef Py_ssize_t i, l, c, k, off, a
    cdef Py_ssize_t idx[8]
    cdef double w[8]
    cdef double f[3]
    cdef double pp[3]
    cdef double gp[3]
    cdef bint inside[3]
    cdef int cell[3]
    cdef int N, bit
    cdef double g, t, dwk
    cdef bint dn
    cdef u64 hs = <u64>hsize
    with nogil:
        for i in range(n):
            for a in range(3):
                t = xyz[i, a]
                inside[a] = 0.0 <= t <= 1.0
                pp[a] = _clamp01(t)
                gp[a] = 0.0
            for l in range(L):
                N = res[l]
                dn = dense[l]
                off = offsets[l]
                for a in range(3):
                    t = pp[a] * N
                    cell[a] = _cell(t, N)
                    f[a] = t - cell[a]
                for k in range(8):
                    w[k] = 1.0
                    for a in range(3):
                        bit = (k >> a) & 1
                        w[k] *= f[a] if bit else 1 - f[a]
                    idx[k] = off + _idx3(cell[0] + (k & 1), cell[1] + ((k >> 1) & 1),
                                         cell[2] + ((k >> 2) & 1), N, dn, hs)
                for c in range(C):
                    g = dout[i, l * C + c]
                    if g == 0.0:
                        continue
                    for k in range(8):
                        if want_table:
                            table_grad[idx[k], c] += w[k] * g
                        if want_xyz:
                            for a in range(3):
                                # d w_k / d f_a = w_k / (factor a) * (+1 or -1)
                                dwk = 1.0
                                for bit in range(3):
                                    if bit == a:
                                        dwk *= 1.0 if (k >> bit) & 1 else -1.0
                                    else:
                                        dwk *= f[bit] if (k >> bit) & 1 else 1 - f[bit]
                                gp[a] += g * N * dwk * table[idx[k], c]
            if want_xyz:
                for a in range(3):
                    dxyz[i, a] = gp[a] if inside[a] else 0.0
