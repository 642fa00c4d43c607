# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled decode kernel: one fused transformer-layer step per call.

Must stay semantically aligned with ``_pykernels.layer_decode``: float32
at op boundaries, float64 accumulation inside reductions.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

BACKEND = "compiled"

cdef double GELU_C = sqrt(2.0 / np.pi)


cdef void _ln(const float[::1] x, const float[::1] gain, const float[::1] bias,
              double eps, float[::1] out) noexcept nogil:
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t i
    cdef double mean = 0.0, var = 0.0, c, inv
    for i in range(d):
        mean += x[i]
    mean /= d
    for i in range(d):
        c = x[i] - mean
        var += c * c
    var /= d
    inv = 1.0 / sqrt(var + eps)
    for i in range(d):
        out[i] = <float>(((x[i] - mean) * inv) * gain[i] + bias[i])


cdef void _matvec(const float[::1] x, const float[:, ::1] w, const float[::1] bias,
                  double[::1] acc, float[::1] out) noexcept nogil:
    cdef Py_ssize_t d_in = w.shape[0], d_out = w.shape[1]
    cdef Py_ssize_t i, j
    cdef double xi
    for j in range(d_out):
        acc[j] = 0.0
    for i in range(d_in):
        xi = x[i]
        for j in range(d_out):
            acc[j] += xi * w[i, j]
    for j in range(d_out):
        out[j] = <float>acc[j]
        out[j] = out[j] + bias[j]


def layer_decode(
    const float[::1] x,
    const float[::1] g1, const float[::1] b1,
    const float[:, ::1] wq, const float[::1] bq,
    const float[:, ::1] wk, const float[::1] bk,
    const float[:, ::1] wv, const float[::1] bv,
    const float[:, ::1] wo, const float[::1] bo,
    const float[::1] g2, const float[::1] b2,
    const float[:, ::1] w1, const float[::1] bm1,
    const float[:, ::1] w2, const float[::1] bm2,
    float[:, :, ::1] kcache, float[:, :, ::1] vcache,
    Py_ssize_t t, double ln_eps, float[::1] attn_out,
):
    """Mirror of the numpy fallback; see ``_pykernels.layer_decode``.

    ``attn_out`` is a flat buffer of heads * (t + 1) weights, head-major.
    """
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t n_heads = kcache.shape[1]
    cdef Py_ssize_t head_dim = kcache.shape[2]
    cdef Py_ssize_t d_ff = w1.shape[1]
    cdef float inv = <float>(1.0 / sqrt(<double>head_dim))

    out_arr = np.empty(d, dtype=np.float32)
    cdef float[::1] out = out_arr
    cdef float[::1] h = np.empty(d, dtype=np.float32)
    cdef float[::1] q = np.empty(d, dtype=np.float32)
    cdef float[::1] kv = np.empty(d, dtype=np.float32)
    cdef float[::1] ctx = np.empty(d, dtype=np.float32)
    cdef float[::1] x2 = np.empty(d, dtype=np.float32)
    cdef float[::1] u = np.empty(d_ff, dtype=np.float32)
    cdef double[::1] acc = np.empty(max(d, d_ff), dtype=np.float64)
    cdef double[::1] sacc = np.empty(t + 1, dtype=np.float64)

    cdef Py_ssize_t i, j, hh, base, arow
    cdef double s, smax, ssum, xi, g

    with nogil:
        _ln(x, g1, b1, ln_eps, h)
        _matvec(h, wq, bq, acc, q)
        _matvec(h, wk, bk, acc, kv)
        for i in range(d):
            kcache[t, i / head_dim, i % head_dim] = kv[i]
        _matvec(h, wv, bv, acc, kv)
        for i in range(d):
            vcache[t, i / head_dim, i % head_dim] = kv[i]

        for hh in range(n_heads):
            base = hh * head_dim
            arow = hh * (t + 1)
            # scores, rounded to float32 like the batched path
            for j in range(t + 1):
                s = 0.0
                for i in range(head_dim):
                    s += q[base + i] * kcache[j, hh, i]
                sacc[j] = <float>((<float>s) * inv)
            smax = sacc[0]
            for j in range(1, t + 1):
                if sacc[j] > smax:
                    smax = sacc[j]
            ssum = 0.0
            for j in range(t + 1):
                sacc[j] = exp(sacc[j] - smax)
                ssum += sacc[j]
            for j in range(t + 1):
                attn_out[arow + j] = <float>(sacc[j] / ssum)
            for i in range(head_dim):
                s = 0.0
                for j in range(t + 1):
                    s += attn_out[arow + j] * vcache[j, hh, i]
                ctx[base + i] = <float>s

        _matvec(ctx, wo, bo, acc, h)
        for i in range(d):
            x2[i] = x[i] + h[i]

        _ln(x2, g2, b2, ln_eps, h)
        _matvec(h, w1, bm1, acc, u)
        for j in range(d_ff):
            xi = u[j]
            g = 0.5 * xi * (1.0 + tanh(GELU_C * (xi + 0.044715 * xi * xi * xi)))
            u[j] = <float>g
        _matvec(u, w2, bm2, acc, out)
        for i in range(d):
            out[i] = x2[i] + out[i]

    return out_arr
