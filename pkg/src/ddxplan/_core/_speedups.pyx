# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; fallback.py defines the reference semantics.

Integer/boolean kernels (action_mask, categorical_sample, gae_scan) are
bit-compatible with the fallback; masked_softmax_1d may differ in the last
ulp because libm exp and numpy's vectorized exp round differently.
"""

import numpy as np

from libc.math cimport exp

BACKEND_NAME = "compiled"


def gae_scan(rewards, values, dones, double gamma, double lam):
    r_arr = np.ascontiguousarray(rewards, dtype=np.float64)
    v_arr = np.ascontiguousarray(values, dtype=np.float64)
    d_arr = np.ascontiguousarray(dones, dtype=np.float64)
    cdef double[::1] r = r_arr
    cdef double[::1] v = v_arr
    cdef double[::1] d = d_arr
    cdef Py_ssize_t n = r.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] adv = out
    cdef double last = 0.0
    cdef double nonterminal, next_value, delta
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        next_value = v[t + 1] if t + 1 < n else 0.0
        delta = r[t] + gamma * next_value * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return out


def masked_softmax_1d(logits, mask):
    l_arr = np.ascontiguousarray(logits, dtype=np.float64)
    m_arr = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef double[::1] l = l_arr
    cdef unsigned char[::1] m = m_arr
    cdef Py_ssize_t n = l.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] p = out
    cdef Py_ssize_t i
    cdef bint any_set = False
    cdef double hi = 0.0
    for i in range(n):
        if m[i]:
            if not any_set or l[i] > hi:
                hi = l[i]
            any_set = True
    if not any_set:
        raise ValueError("masked_softmax: mask has no set bits")
    cdef double total = 0.0
    for i in range(n):
        if m[i]:
            p[i] = exp(l[i] - hi)
            total += p[i]
    for i in range(n):
        if m[i]:
            p[i] /= total
    return out


def categorical_sample(probs, double u):
    p_arr = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[::1] p = p_arr
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double total = 0.0
    for i in range(n):
        total += p[i]
    cdef double target = u * total
    cdef double acc = 0.0
    for i in range(n):
        acc += p[i]
        if acc > target:
            return i
    for i in range(n - 1, -1, -1):
        if p[i] > 0.0:
            return i
    raise ValueError("categorical_sample: no positive mass")


def action_mask(asked, triplets, parent_index):
    a_arr = np.ascontiguousarray(asked, dtype=np.uint8)
    t_arr = np.ascontiguousarray(triplets, dtype=np.float64)
    pid_arr = np.ascontiguousarray(parent_index, dtype=np.int64)
    cdef unsigned char[::1] a = a_arr
    cdef double[::1] t = t_arr
    cdef long long[::1] pid = pid_arr
    cdef Py_ssize_t n = a.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    cdef unsigned char[::1] o = out.view(np.uint8)
    cdef Py_ssize_t j
    cdef long long parent
    for j in range(n):
        if a[j]:
            continue
        parent = pid[j]
        if parent < 0 or t[3 * parent + 1] == 1.0:
            o[j] = 1
    return out
