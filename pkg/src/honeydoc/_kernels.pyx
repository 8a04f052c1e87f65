# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

from libc.stdint cimport int64_t

cnp.import_array()

MOD32 = 1 << 32
HEADER_WIDTH = 7

BACKEND = "cython"


def seq_add(object base, object delta):
    cdef long long b = base
    cdef long long d = delta
    cdef long long r = (b + d) % 4294967296
    if r < 0:
        r += 4294967296
    return r


def pack_rows(rows):
    if not rows:
        return np.zeros((0, HEADER_WIDTH), dtype=np.int64)
    return np.ascontiguousarray(np.array(rows, dtype=np.int64).reshape(-1, HEADER_WIDTH))


cdef inline Py_ssize_t _scan(const int64_t[:, ::1] rows, Py_ssize_t start,
                             int64_t k0, int64_t k1, int64_t k2,
                             int64_t k3, int64_t k4, int64_t k5) nogil:
    cdef Py_ssize_t i
    cdef Py_ssize_t n = rows.shape[0]
    cdef int64_t mask
    for i in range(start, n):
        mask = rows[i, 0]
        if mask & 1 and rows[i, 1] != k0:
            continue
        if mask & 2 and rows[i, 2] != k1:
            continue
        if mask & 4 and rows[i, 3] != k2:
            continue
        if mask & 8 and rows[i, 4] != k3:
            continue
        if mask & 16 and rows[i, 5] != k4:
            continue
        if mask & 32 and rows[i, 6] != k5:
            continue
        return i
    return -1


def match_first(packed, key):
    cdef const int64_t[:, ::1] rows = packed
    if rows.shape[0] == 0:
        return -1
    return _scan(rows, 0, key[0], key[1], key[2], key[3], key[4], key[5])


def first_rule_match(packed, contents, key, bytes payload):
    cdef const int64_t[:, ::1] rows = packed
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t start = 0
    cdef Py_ssize_t idx
    cdef int64_t k0 = key[0], k1 = key[1], k2 = key[2]
    cdef int64_t k3 = key[3], k4 = key[4], k5 = key[5]
    while start < n:
        idx = _scan(rows, start, k0, k1, k2, k3, k4, k5)
        if idx < 0:
            return -1
        content = contents[idx]
        if content is None or content in payload:
            return idx
        start = idx + 1
    return -1


def bin_counts(times_us, long long bin_us):
    cdef dict counts = {}
    cdef long long t, b
    for t in times_us:
        b = t // bin_us
        counts[b] = counts.get(b, 0) + 1
    return counts
