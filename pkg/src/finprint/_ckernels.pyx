# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Loop orders mirror the numpy versions so the two backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

BACKEND = "cython"

cdef inline double _dmin(double a, double b) nogil:
    return a if a < b else b

cdef inline double _dmax(double a, double b) nogil:
    return a if a > b else b


def im2col(const double[:, :, :, ::1] x_pad, int k):
    cdef Py_ssize_t n = x_pad.shape[0], hp = x_pad.shape[1], wp = x_pad.shape[2], c = x_pad.shape[3]
    cdef Py_ssize_t ho = hp - k + 1, wo = wp - k + 1
    out_arr = np.empty((n * ho * wo, k * k * c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ki, kj, ch, row, col
    with nogil:
        row = 0
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    col = 0
                    for ki in range(k):
                        for kj in range(k):
                            for ch in range(c):
                                out[row, col] = x_pad[b, i + ki, j + kj, ch]
                                col += 1
                    row += 1
    return out_arr


def col2im(const double[:, ::1] dcols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c, int k):
    cdef Py_ssize_t hp = h + k - 1, wp = w + k - 1
    out_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, p, q, i, j, ki, kj, ch, row, base
    with nogil:
        # gather per output pixel, offsets in (ki, kj) order: the same
        # per-element summation order as the numpy twin's sequential adds
        for b in range(n):
            for p in range(hp):
                for q in range(wp):
                    for ki in range(k):
                        i = p - ki
                        if i < 0 or i >= h:
                            continue
                        for kj in range(k):
                            j = q - kj
                            if j < 0 or j >= w:
                                continue
                            row = (b * h + i) * w + j
                            base = (ki * k + kj) * c
                            for ch in range(c):
                                out[b, p, q, ch] += dcols[row, base + ch]
    return out_arr


def maxpool2_forward(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    arg_arr = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, i, j, ch
    cdef double best, v
    cdef cnp.int8_t a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        a = 0
                        v = x[b, 2 * i, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            a = 1
                        v = x[b, 2 * i + 1, 2 * j, ch]
                        if v > best:
                            best = v
                            a = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            a = 3
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = a
    return out_arr, arg_arr


def maxpool2_backward(const double[:, :, :, ::1] dout, const cnp.int8_t[:, :, :, ::1] arg,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    dx_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, i, j, ch
    cdef int a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        a = arg[b, i, j, ch]
                        dx[b, 2 * i + a // 2, 2 * j + a % 2, ch] = dout[b, i, j, ch]
    return dx_arr


def box_distance_matrix(frame, x, y, w, h, double lam, double max_distance):
    cdef const cnp.int64_t[::1] f = np.ascontiguousarray(frame, dtype=np.int64)
    cdef const double[::1] bx = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] by = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] bw = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] bh = np.ascontiguousarray(h, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], i, j
    out_arr = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double ix, iy, inter, iou, gap, temporal
    with nogil:
        for i in range(n):
            for j in range(n):
                if f[i] == f[j]:
                    out[i, j] = max_distance
                    continue
                ix = _dmax(0.0, _dmin(bx[i] + bw[i], bx[j] + bw[j]) - _dmax(bx[i], bx[j]))
                iy = _dmax(0.0, _dmin(by[i] + bh[i], by[j] + bh[j]) - _dmax(by[i], by[j]))
                inter = ix * iy
                iou = inter / ((bw[i] * bh[i] + bw[j] * bh[j]) - inter)
                if iou > 1.0:
                    iou = 1.0
                gap = <double>(f[i] - f[j])
                gap = fabs(gap)
                temporal = _dmin(1.0, lam * gap)
                out[i, j] = ((1.0 - iou) + temporal) / 2.0
    return out_arr


def dbscan_labels(dist, double eps, Py_ssize_t min_pts):
    cdef const double[:, ::1] d = np.ascontiguousarray(dist, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0]
    labels_arr = np.full(n, -2, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    counts_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    # a point enters a cluster's queue at most once; re-enqueueing would be a no-op
    queue_arr = np.empty(max(n, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr
    stamp_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] stamp = stamp_arr
    cdef Py_ssize_t i, j, q, head, tail
    cdef cnp.int64_t cluster = 0
    with nogil:
        for i in range(n):
            for j in range(n):
                if i == j or d[i, j] <= eps:
                    counts[i] += 1
        for i in range(n):
            if labels[i] != -2:
                continue
            if counts[i] < min_pts:
                labels[i] = -1
                continue
            labels[i] = cluster
            head = 0
            tail = 0
            for j in range(n):
                if i == j or d[i, j] <= eps:
                    stamp[j] = cluster
                    queue[tail] = j
                    tail += 1
            while head < tail:
                q = queue[head]
                head += 1
                if labels[q] == -1:
                    labels[q] = cluster
                if labels[q] != -2:
                    continue
                labels[q] = cluster
                if counts[q] >= min_pts:
                    for j in range(n):
                        if (q == j or d[q, j] <= eps) and stamp[j] != cluster:
                            stamp[j] = cluster
                            queue[tail] = j
                            tail += 1
            cluster += 1
    return labels_arr
