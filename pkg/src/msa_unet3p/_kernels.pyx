# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled boundary kernels: 8-neighbour surface extraction and Moore tracing."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef int DR[8]
cdef int DC[8]
DR[:] = [0, -1, -1, -1, 0, 1, 1, 1]
DC[:] = [-1, -1, 0, 1, 1, 1, 0, -1]


cdef inline bint _fg(const unsigned char[:, ::1] m, Py_ssize_t h, Py_ssize_t w,
                     Py_ssize_t r, Py_ssize_t c) nogil:
    return 0 <= r < h and 0 <= c < w and m[r, c] != 0


cdef inline int _dir(int dr, int dc) nogil:
    cdef int i
    for i in range(8):
        if DR[i] == dr and DC[i] == dc:
            return i
    return -1


def surface_mask(mask):
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1], r, c
    cdef int k
    out = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    with nogil:
        for r in range(h):
            for c in range(w):
                if m[r, c] == 0:
                    continue
                for k in range(8):
                    if not _fg(m, h, w, r + DR[k], c + DC[k]):
                        o[r, c] = 1
                        break
    return out


cdef Py_ssize_t _trace_one(const unsigned char[:, ::1] m, Py_ssize_t h, Py_ssize_t w,
                           Py_ssize_t r0, Py_ssize_t c0,
                           cnp.int64_t[:, ::1] buf, Py_ssize_t n) nogil:
    cdef Py_ssize_t pr = r0, pc = c0, qr = 0, qc = 0, fr = -1, fc = -1
    cdef Py_ssize_t step, limit = 4 * h * w + 8, start = n
    cdef int back = 0, d = 0, k, dp
    cdef bint found
    buf[n, 0] = r0
    buf[n, 1] = c0
    n += 1
    for step in range(limit):
        found = False
        for k in range(1, 9):
            d = (back + k) % 8
            qr = pr + DR[d]
            qc = pc + DC[d]
            if _fg(m, h, w, qr, qc):
                found = True
                break
        if not found:
            return n
        if fr < 0:
            fr = qr
            fc = qc
        elif pr == r0 and pc == c0 and qr == fr and qc == fc:
            break
        dp = (d + 7) % 8
        back = _dir(<int>(pr + DR[dp] - qr), <int>(pc + DC[dp] - qc))
        buf[n, 0] = qr
        buf[n, 1] = qc
        n += 1
        pr = qr
        pc = qc
    if n - start > 1 and buf[n - 1, 0] == r0 and buf[n - 1, 1] == c0:
        n -= 1
    return n


def trace_contours(mask, labels):
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const cnp.int32_t[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int32)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1], r, c, n = 0
    cdef cnp.int32_t l
    cdef int nlab = int(np.max(labels)) if labels.size else 0
    seen_arr = np.zeros(nlab + 1, dtype=np.uint8)
    cdef unsigned char[::1] seen = seen_arr
    # a border trace visits each pixel at most 4 times
    buf_arr = np.empty((4 * h * w + 8, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] buf = buf_arr
    with nogil:
        for r in range(h):
            for c in range(w):
                l = lab[r, c]
                if l > 0 and seen[l] == 0:
                    seen[l] = 1
                    n = _trace_one(m, h, w, r, c, buf, n)
    return buf_arr[:n].copy()
