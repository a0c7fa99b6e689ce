# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the routines in ``_pykernels``.

Results must be bit-identical to the numpy path: same distance accumulation
order, same (distance, x, y, z, index) tie-breaking.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline bint _lex_less(const double[:, ::1] p, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    if p[a, 0] != p[b, 0]:
        return p[a, 0] < p[b, 0]
    if p[a, 1] != p[b, 1]:
        return p[a, 1] < p[b, 1]
    if p[a, 2] != p[b, 2]:
        return p[a, 2] < p[b, 2]
    return a < b


cdef inline double _sq(double dx, double dy, double dz) noexcept nogil:
    return dx * dx + dy * dy + dz * dz


def fps(const double[:, ::1] points, Py_ssize_t n_out, centroid):
    cdef Py_ssize_t n = points.shape[0]
    cdef double cx = centroid[0], cy = centroid[1], cz = centroid[2]
    out_arr = np.empty(n_out, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    mind_arr = np.full(n, INFINITY)
    cdef double[::1] mind = mind_arr
    picked_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] picked = picked_arr
    cdef Py_ssize_t i, t, cur = 0
    cdef double d, best, px, py, pz
    with nogil:
        best = -1.0
        for i in range(n):
            d = _sq(points[i, 0] - cx, points[i, 1] - cy, points[i, 2] - cz)
            if d > best or (d == best and _lex_less(points, i, cur)):
                best = d
                cur = i
        out[0] = cur
        picked[cur] = 1
        for t in range(1, n_out):
            px = points[cur, 0]
            py = points[cur, 1]
            pz = points[cur, 2]
            best = -1.0
            cur = -1
            for i in range(n):
                d = _sq(points[i, 0] - px, points[i, 1] - py, points[i, 2] - pz)
                if d < mind[i]:
                    mind[i] = d
                if picked[i]:
                    continue
                d = mind[i]
                if d > best or (d == best and _lex_less(points, i, cur)):
                    best = d
                    cur = i
            out[t] = cur
            picked[cur] = 1
    return out_arr


cdef inline bint _before(double da, Py_ssize_t a, double db, Py_ssize_t b,
                         const double[:, ::1] s) noexcept nogil:
    if da != db:
        return da < db
    return _lex_less(s, a, b)


def knn(const double[:, ::1] query, const double[:, ::1] support, Py_ssize_t k):
    cdef Py_ssize_t nq = query.shape[0], ns = support.shape[0]
    idx_arr = np.empty((nq, k), dtype=np.int64)
    dist_arr = np.empty((nq, k), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] dist = dist_arr
    cdef Py_ssize_t i, j, c, filled
    cdef double qx, qy, qz, d
    with nogil:
        for i in range(nq):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            filled = 0
            for j in range(ns):
                d = _sq(qx - support[j, 0], qy - support[j, 1], qz - support[j, 2])
                if filled == k and not _before(d, j, dist[i, k - 1], idx[i, k - 1], support):
                    continue
                c = filled if filled < k else k - 1
                # insertion into the sorted row buffer
                while c > 0 and _before(d, j, dist[i, c - 1], idx[i, c - 1], support):
                    if c < k:
                        dist[i, c] = dist[i, c - 1]
                        idx[i, c] = idx[i, c - 1]
                    c -= 1
                dist[i, c] = d
                idx[i, c] = j
                if filled < k:
                    filled += 1
    return idx_arr, dist_arr


def scatter_add_rows(double[:, ::1] out, const cnp.int64_t[::1] index, const double[:, ::1] src):
    cdef Py_ssize_t m = index.shape[0], d = out.shape[1], r, c, t
    with nogil:
        for r in range(m):
            t = index[r]
            for c in range(d):
                out[t, c] += src[r, c]
