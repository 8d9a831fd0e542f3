# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Results are bit-identical to the fallback: accumulation in ``col2im`` visits
kernel offsets in the same row-major order, and ties in the pooling kernels
resolve to the first maximum.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t b = xp.shape[0], hp = xp.shape[1], wp = xp.shape[2], c = xp.shape[3]
    cdef Py_ssize_t ho = hp - kh + 1, wo = wp - kw + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((b, ho, wo, kh * kw * c), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t n, y, x, i, j, ch, col
    with nogil:
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    col = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                o[n, y, x, col] = xp[n, y + i, x + j, ch]
                                col = col + 1
    return out


def col2im(real[:, :, :, ::1] cols, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t c):
    cdef Py_ssize_t b = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t n, y, x, i, j, ch, base
    with nogil:
        for i in range(kh):
            for j in range(kw):
                base = (i * kw + j) * c
                for n in range(b):
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                o[n, y + i, x + j, ch] = o[n, y + i, x + j, ch] + cols[n, y, x, base + ch]
    return out


def pool_forward(real[:, :, :, ::1] x, Py_ssize_t p):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // p, wo = w // p
    dtype = np.float32 if real is float else np.float64
    out = np.empty((b, ho, wo, c), dtype=dtype)
    arg = np.empty((b, ho, wo, c), dtype=np.int64)
    cdef real[:, :, :, ::1] o = out
    cdef int64_t[:, :, :, ::1] g = arg
    cdef Py_ssize_t n, y, xx, ch, u, v
    cdef real best, val
    cdef int64_t bi
    with nogil:
        for n in range(b):
            for y in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        best = x[n, y * p, xx * p, ch]
                        bi = 0
                        for u in range(p):
                            for v in range(p):
                                val = x[n, y * p + u, xx * p + v, ch]
                                if val > best:
                                    best = val
                                    bi = u * p + v
                        o[n, y, xx, ch] = best
                        g[n, y, xx, ch] = bi
    return out, arg


def pool_backward(real[:, :, :, ::1] grad, int64_t[:, :, :, ::1] arg,
                  Py_ssize_t h, Py_ssize_t w, Py_ssize_t p):
    cdef Py_ssize_t b = grad.shape[0], ho = grad.shape[1], wo = grad.shape[2], c = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t n, y, x, ch
    cdef int64_t k
    with nogil:
        for n in range(b):
            for y in range(ho):
                for x in range(wo):
                    for ch in range(c):
                        k = arg[n, y, x, ch]
                        o[n, y * p + k // p, x * p + k % p, ch] = grad[n, y, x, ch]
    return out


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline Py_ssize_t _join(Py_ssize_t[::1] parent, Py_ssize_t[::1] rank,
                             Py_ssize_t[::1] size, Py_ssize_t x, Py_ssize_t y) noexcept nogil:
    if rank[x] > rank[y]:
        parent[y] = x
        size[x] += size[y]
        return x
    parent[x] = y
    size[y] += size[x]
    if rank[x] == rank[y]:
        rank[y] += 1
    return y


def segment_graph(Py_ssize_t n, const int64_t[::1] a, const int64_t[::1] b,
                  const double[::1] w, double k, Py_ssize_t min_size):
    parent_arr = np.arange(n, dtype=np.intp)
    rank_arr = np.zeros(n, dtype=np.intp)
    size_arr = np.ones(n, dtype=np.intp)
    thresh_arr = np.full(n, k, dtype=np.float64)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t[::1] rank = rank_arr
    cdef Py_ssize_t[::1] size = size_arr
    cdef double[::1] thresh = thresh_arr
    cdef Py_ssize_t e, m = w.shape[0], ra, rb, r, i
    with nogil:
        for e in range(m):
            ra = _find(parent, a[e])
            rb = _find(parent, b[e])
            if ra != rb and w[e] <= thresh[ra] and w[e] <= thresh[rb]:
                r = _join(parent, rank, size, ra, rb)
                thresh[r] = w[e] + k / size[r]
        for e in range(m):
            ra = _find(parent, a[e])
            rb = _find(parent, b[e])
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                _join(parent, rank, size, ra, rb)
    labels = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] lab = labels
    with nogil:
        for i in range(n):
            lab[i] = _find(parent, i)
    return labels


def roi_max_pool(real[:, :, ::1] fmap, Py_ssize_t y0, Py_ssize_t x0, Py_ssize_t y1,
                 Py_ssize_t x1, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t c = fmap.shape[2], eh = y1 - y0, ew = x1 - x0
    dtype = np.float32 if real is float else np.float64
    out = np.empty((oh, ow, c), dtype=dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t i, j, ys, ye, xs, xe, y, x, ch
    cdef real best
    with nogil:
        for i in range(oh):
            ys = y0 + (i * eh) // oh
            ye = y0 + ((i + 1) * eh) // oh
            if ye < ys + 1:
                ye = ys + 1
            for j in range(ow):
                xs = x0 + (j * ew) // ow
                xe = x0 + ((j + 1) * ew) // ow
                if xe < xs + 1:
                    xe = xs + 1
                for ch in range(c):
                    best = fmap[ys, xs, ch]
                    for y in range(ys, ye):
                        for x in range(xs, xe):
                            if fmap[y, x, ch] > best:
                                best = fmap[y, x, ch]
                    o[i, j, ch] = best
    return out
