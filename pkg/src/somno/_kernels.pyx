# cython: language_level=3
"""Compiled inner loops. Mirrors ``somno._kernels_py`` output to rounding."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def fir_decimate(const double[:, ::1] padded, const double[::1] taps, Py_ssize_t factor,
                 Py_ssize_t n_out):
    """Strided FIR correlation ``y[c, m] = sum_k taps[k] * padded[c, m*factor + k]``.

    ``taps`` must be symmetric with odd length; the fold over the centre tap
    halves the multiply count.
    """
    cdef Py_ssize_t n_ch = padded.shape[0]
    cdef Py_ssize_t n_taps = taps.shape[0]
    cdef Py_ssize_t half = n_taps // 2
    if n_taps % 2 != 1:
        raise ValueError("taps must have odd length")
    if n_out > 0 and (n_out - 1) * factor + n_taps > padded.shape[1]:
        raise ValueError("padded input too short for requested output length")
    out = np.empty((n_ch, n_out), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t c, m, k, base
    cdef double acc
    with nogil:
        for c in range(n_ch):
            for m in range(n_out):
                base = m * factor
                acc = taps[half] * padded[c, base + half]
                for k in range(half):
                    acc = acc + taps[k] * (padded[c, base + k] + padded[c, base + n_taps - 1 - k])
                y[c, m] = acc
    return out


def onepole_lowpass(const double[:, ::1] x, double a):
    """``y[c, i] = a * y[c, i-1] + (1 - a) * x[c, i]`` with ``y[c, -1] = 0``."""
    cdef Py_ssize_t n_ch = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    out = np.empty((n_ch, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double b = 1.0 - a
    cdef double acc
    cdef Py_ssize_t c, i
    with nogil:
        for c in range(n_ch):
            acc = 0.0
            for i in range(n):
                acc = a * acc + b * x[c, i]
                y[c, i] = acc
    return out
