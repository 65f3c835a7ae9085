# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled embedding-bag kernels. Accumulation order matches ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def bag_forward(const double[:, ::1] emb, const cnp.int64_t[:, ::1] ids,
                const double[:, ::1] weights):
    cdef Py_ssize_t B = ids.shape[0], L = ids.shape[1], d = emb.shape[1]
    cdef Py_ssize_t b, l, k
    cdef cnp.int64_t t
    cdef double w
    out_arr = np.zeros((B, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for l in range(L):
                w = weights[b, l]
                if w == 0.0:
                    continue
                t = ids[b, l]
                for k in range(d):
                    out[b, k] += w * emb[t, k]
    return out_arr


def bag_backward(const double[:, ::1] grad_out, const cnp.int64_t[:, ::1] ids,
                 const double[:, ::1] weights, Py_ssize_t vocab_size):
    cdef Py_ssize_t B = ids.shape[0], L = ids.shape[1], d = grad_out.shape[1]
    cdef Py_ssize_t b, l, k
    cdef cnp.int64_t t
    cdef double w
    out_arr = np.zeros((vocab_size, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for l in range(L):
                w = weights[b, l]
                if w == 0.0:
                    continue
                t = ids[b, l]
                for k in range(d):
                    out[t, k] += w * grad_out[b, k]
    return out_arr
