# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled segment-reduction kernels (hot loops of every Bellman sweep)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def seg_sum(const double[::1] x, const cnp.int64_t[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            acc += x[j]
        o[i] = acc
    return out


def seg_max(const double[::1] x, const cnp.int64_t[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double m
    for i in range(n):
        m = x[offsets[i]]
        for j in range(offsets[i] + 1, offsets[i + 1]):
            if x[j] > m:
                m = x[j]
        o[i] = m
    return out


def seg_logsumexp(const double[::1] x, const cnp.int64_t[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, acc
    for i in range(n):
        m = x[offsets[i]]
        for j in range(offsets[i] + 1, offsets[i + 1]):
            if x[j] > m:
                m = x[j]
        acc = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            acc += exp(x[j] - m)
        o[i] = m + log(acc)
    return out


def seg_softmax(const double[::1] x, const cnp.int64_t[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, z
    for i in range(n):
        m = x[offsets[i]]
        for j in range(offsets[i] + 1, offsets[i + 1]):
            if x[j] > m:
                m = x[j]
        z = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            o[j] = exp(x[j] - m)
            z += o[j]
        for j in range(offsets[i], offsets[i + 1]):
            o[j] /= z
    return out


def seg_expect_smooth(const double[::1] q, const double[::1] p, const cnp.int64_t[::1] offsets):
    # Per segment: sum_i p_i * (q_i - log p_i), with 0 * log 0 := 0.
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            if p[j] > 0.0:
                acc += p[j] * (q[j] - log(p[j]))
        o[i] = acc
    return out


def dense_logsumexp(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, acc
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        acc = 0.0
        for j in range(v):
            acc += exp(x[i, j] - m)
        o[i] = m + log(acc)
    return out


def dense_softmax(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, z
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(v):
            o[i, j] = exp(x[i, j] - m)
            z += o[i, j]
        for j in range(v):
            o[i, j] /= z
    return out


def dense_expect_smooth(const double[:, ::1] q, const double[:, ::1] p):
    cdef Py_ssize_t n = q.shape[0], v = q.shape[1]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(v):
            if p[i, j] > 0.0:
                acc += p[i, j] * (q[i, j] - log(p[i, j]))
        o[i] = acc
    return out


cdef void _seg_lse(const double[::1] x, const cnp.int64_t[::1] offsets, double[::1] v) noexcept nogil:
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t i, j
    cdef double m, acc
    for i in range(n):
        m = x[offsets[i]]
        for j in range(offsets[i] + 1, offsets[i + 1]):
            if x[j] > m:
                m = x[j]
        acc = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            acc += exp(x[j] - m)
        v[i] = m + log(acc)


cdef void _seg_expect(const double[::1] q, const double[::1] p,
                      const cnp.int64_t[::1] offsets, double[::1] v) noexcept nogil:
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            if p[j] > 0.0:
                acc += p[j] * (q[j] - log(p[j]))
        v[i] = acc


cdef void _apply_next(const double[::1] v, const double[::1] r,
                      const cnp.int64_t[::1] next_idx, double gamma,
                      double[::1] out) noexcept nogil:
    # Successor index == len(v) means the terminal state (value zero).
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t k
    cdef cnp.int64_t t
    for k in range(out.shape[0]):
        t = next_idx[k]
        out[k] = r[k] + (gamma * v[t] if t < n else 0.0)


def restricted_backup_opt(const double[::1] qbar, const double[::1] r_flat,
                          const cnp.int64_t[::1] next_idx,
                          const cnp.int64_t[::1] offsets, double gamma):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(qbar.shape[0], dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v = np.empty(n, dtype=np.float64)
    _seg_lse(qbar, offsets, v)
    _apply_next(v, r_flat, next_idx, gamma, out)
    return out


def restricted_backup_eval(const double[::1] qbar, const double[::1] probs_flat,
                           const double[::1] r_flat, const cnp.int64_t[::1] next_idx,
                           const cnp.int64_t[::1] offsets, double gamma):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out = np.empty(qbar.shape[0], dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v = np.empty(n, dtype=np.float64)
    _seg_expect(qbar, probs_flat, offsets, v)
    _apply_next(v, r_flat, next_idx, gamma, out)
    return out


def dense_backup_opt(const double[:, ::1] q, const double[:, ::1] r,
                     const cnp.int64_t[:, ::1] next_idx, double gamma):
    cdef Py_ssize_t n = q.shape[0], v_width = q.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, v_width), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double m, acc
    cdef cnp.int64_t t
    cdef cnp.ndarray[double, ndim=1] val = np.empty(n, dtype=np.float64)
    cdef double[::1] vv = val
    with nogil:
        for i in range(n):
            m = q[i, 0]
            for j in range(1, v_width):
                if q[i, j] > m:
                    m = q[i, j]
            acc = 0.0
            for j in range(v_width):
                acc += exp(q[i, j] - m)
            vv[i] = m + log(acc)
        for i in range(n):
            for j in range(v_width):
                t = next_idx[i, j]
                o[i, j] = r[i, j] + (gamma * vv[t] if t < n else 0.0)
    return out


def dense_backup_eval(const double[:, ::1] q, const double[:, ::1] probs,
                      const double[:, ::1] r, const cnp.int64_t[:, ::1] next_idx,
                      double gamma):
    cdef Py_ssize_t n = q.shape[0], v_width = q.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, v_width), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc
    cdef cnp.int64_t t
    cdef cnp.ndarray[double, ndim=1] val = np.empty(n, dtype=np.float64)
    cdef double[::1] vv = val
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(v_width):
                if probs[i, j] > 0.0:
                    acc += probs[i, j] * (q[i, j] - log(probs[i, j]))
            vv[i] = acc
        for i in range(n):
            for j in range(v_width):
                t = next_idx[i, j]
                o[i, j] = r[i, j] + (gamma * vv[t] if t < n else 0.0)
    return out
