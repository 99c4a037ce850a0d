# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled neighborhood attention forward/backward.

Arrays are (N, H, W, D) with N = batch * heads. Queries are expected to be
pre-scaled. The window is clamped at the borders so every query sees
exactly kh * kw keys.
"""
from libc.math cimport exp

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _start(Py_ssize_t i, Py_ssize_t k, Py_ssize_t n) nogil:
    cdef Py_ssize_t s = i - k // 2
    if s < 0:
        return 0
    if s > n - k:
        return n - k
    return s


def na_forward(real[:, :, :, ::1] q, real[:, :, :, ::1] k, real[:, :, :, ::1] v,
               Py_ssize_t kh, Py_ssize_t kw,
               real[:, :, :, ::1] out, real[:, :, :, ::1] attn):
    cdef Py_ssize_t N = q.shape[0], H = q.shape[1], W = q.shape[2], D = q.shape[3]
    cdef Py_ssize_t n, i, j, a, b, c, t, si, sj
    cdef double acc, mx, total
    with nogil:
        for n in range(N):
            for i in range(H):
                si = _start(i, kh, H)
                for j in range(W):
                    sj = _start(j, kw, W)
                    mx = -1e308
                    t = 0
                    for a in range(kh):
                        for b in range(kw):
                            acc = 0.0
                            for c in range(D):
                                acc = acc + q[n, i, j, c] * k[n, si + a, sj + b, c]
                            attn[n, i, j, t] = <real>acc
                            if acc > mx:
                                mx = acc
                            t = t + 1
                    total = 0.0
                    for t in range(kh * kw):
                        acc = exp(attn[n, i, j, t] - mx)
                        attn[n, i, j, t] = <real>acc
                        total = total + acc
                    for t in range(kh * kw):
                        attn[n, i, j, t] = <real>(attn[n, i, j, t] / total)
                    for c in range(D):
                        out[n, i, j, c] = 0
                    t = 0
                    for a in range(kh):
                        for b in range(kw):
                            for c in range(D):
                                out[n, i, j, c] = out[n, i, j, c] + attn[n, i, j, t] * v[n, si + a, sj + b, c]
                            t = t + 1


def na_backward(real[:, :, :, ::1] q, real[:, :, :, ::1] k, real[:, :, :, ::1] v,
                real[:, :, :, ::1] attn, real[:, :, :, ::1] dout,
                Py_ssize_t kh, Py_ssize_t kw,
                real[:, :, :, ::1] dq, real[:, :, :, ::1] dk, real[:, :, :, ::1] dv,
                real[::1] scratch):
    """Accumulates into dq, dk, dv, which must be zero-initialised."""
    cdef Py_ssize_t N = q.shape[0], H = q.shape[1], W = q.shape[2], D = q.shape[3]
    cdef Py_ssize_t n, i, j, a, b, c, t, si, sj
    cdef double acc, s, g, p
    with nogil:
        for n in range(N):
            for i in range(H):
                si = _start(i, kh, H)
                for j in range(W):
                    sj = _start(j, kw, W)
                    # scratch holds d(loss)/d(attn) for this query
                    s = 0.0
                    t = 0
                    for a in range(kh):
                        for b in range(kw):
                            acc = 0.0
                            for c in range(D):
                                acc = acc + dout[n, i, j, c] * v[n, si + a, sj + b, c]
                            scratch[t] = <real>acc
                            s = s + attn[n, i, j, t] * acc
                            t = t + 1
                    t = 0
                    for a in range(kh):
                        for b in range(kw):
                            p = attn[n, i, j, t]
                            g = p * (scratch[t] - s)
                            for c in range(D):
                                dq[n, i, j, c] = dq[n, i, j, c] + g * k[n, si + a, sj + b, c]
                                dk[n, si + a, sj + b, c] = dk[n, si + a, sj + b, c] + g * q[n, i, j, c]
                                dv[n, si + a, sj + b, c] = dv[n, si + a, sj + b, c] + p * dout[n, i, j, c]
                            t = t + 1
