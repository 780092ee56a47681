"""Pure-numpy implementations of the segment-reduction kernels.

Segments are contiguous slices of a flat float64 array described by a CSR
style ``offsets`` vector (``offsets[i]:offsets[i+1]`` is segment ``i``).
All segments are assumed non-empty; callers enforce this invariant.
"""

import numpy as np


def _sizes(offsets):
    return np.diff(offsets)


def seg_sum(x, offsets):
    return np.add.reduceat(x, offsets[:-1])


def seg_max(x, offsets):
    return np.maximum.reduceat(x, offsets[:-1])


def seg_logsumexp(x, offsets):
    m = np.maximum.reduceat(x, offsets[:-1])
    shifted = np.exp(x - np.repeat(m, _sizes(offsets)))
    return m + np.log(np.add.reduceat(shifted, offsets[:-1]))


def seg_softmax(x, offsets):
    sizes = _sizes(offsets)
    m = np.maximum.reduceat(x, offsets[:-1])
    e = np.exp(x - np.repeat(m, sizes))
    z = np.add.reduceat(e, offsets[:-1])
    return e / np.repeat(z, sizes)


def seg_expect_smooth(q, p, offsets):
    # Per segment: sum_i p_i * (q_i - log p_i), with 0 * log 0 := 0.
    safe_p = np.where(p > 0.0, p, 1.0)
    terms = np.where(p > 0.0, p * (q - np.log(safe_p)), 0.0)
    return np.add.reduceat(terms, offsets[:-1])


def _gather_next(v, next_idx, gamma):
    # Successor values with the terminal state (index len(v)) pinned to zero.
    v_ext = np.append(v, 0.0)
    return gamma * v_ext[next_idx]


def restricted_backup_opt(qbar, r_flat, next_idx, offsets, gamma):
    v = seg_logsumexp(qbar, offsets)
    return r_flat + _gather_next(v, next_idx, gamma)


def restricted_backup_eval(qbar, probs_flat, r_flat, next_idx, offsets, gamma):
    v = seg_expect_smooth(qbar, probs_flat, offsets)
    return r_flat + _gather_next(v, next_idx, gamma)


def dense_backup_opt(q, r, next_idx, gamma):
    v = dense_logsumexp(q)
    return r + _gather_next(v, next_idx, gamma)


def dense_backup_eval(q, probs, r, next_idx, gamma):
    v = dense_expect_smooth(q, probs)
    return r + _gather_next(v, next_idx, gamma)


def dense_logsumexp(x):
    m = np.max(x, axis=1)
    return m + np.log(np.sum(np.exp(x - m[:, None]), axis=1))


def dense_softmax(x):
    e = np.exp(x - np.max(x, axis=1)[:, None])
    return e / np.sum(e, axis=1)[:, None]


def dense_expect_smooth(q, p):
    safe_p = np.where(p > 0.0, p, 1.0)
    terms = np.where(p > 0.0, p * (q - np.log(safe_p)), 0.0)
    return np.sum(terms, axis=1)
