# cython: language_level=3
"""Compiled inner loops for the intermittent skew product.

The x-coordinate follows the Pomeau-Manneville style map

    x -> x (1 + (2x)**a)     for x <= 1/2
    x -> 2x - 1              for x >  1/2

with ``a = alpha0 + alpha_amp * sin(pi*theta)**2``.  The base angle evolves by
``theta -> 4 theta mod 1`` and is stored as a 64-bit binary fraction; each step
shifts out two bits and appends two fresh bits from a per-orbit splitmix64
stream, which samples the Lebesgue-typical future of theta exactly instead of
collapsing to 0 after 26 double-precision quadruplings.

Every routine here has a bit-compatible twin in ``_fallback.py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow, sin, M_PI
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef double TWO_M64 = 5.421010862427522e-20  # 2**-64


cdef inline uint64_t splitmix64(uint64_t *state) nogil:
    cdef uint64_t z
    state[0] += <uint64_t>0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double step_x(double x, double a) nogil:
    if x <= 0.5:
        return x * (1.0 + pow(2.0 * x, a))
    return 2.0 * x - 1.0


cdef inline double alpha_of(uint64_t th, double alpha0, double alpha_amp) nogil:
    cdef double s
    if alpha_amp == 0.0:
        return alpha0
    s = sin(M_PI * (<double>th) * TWO_M64)
    return alpha0 + alpha_amp * s * s


def orbit_block(double[::1] x, uint64_t[::1] theta, uint64_t[::1] rng,
                double alpha0, double alpha_amp, double[:, ::1] out):
    """Fill ``out[e, t]`` with the x-state of orbit ``e`` at time ``t``.

    ``x``, ``theta`` and ``rng`` are advanced in place by ``out.shape[1]`` steps.
    """
    cdef Py_ssize_t n_orbits = x.shape[0]
    cdef Py_ssize_t steps = out.shape[1]
    cdef Py_ssize_t e, t
    cdef double xe, a
    cdef uint64_t th, st
    cdef bint skew = alpha_amp != 0.0
    with nogil:
        for e in range(n_orbits):
            xe = x[e]
            th = theta[e]
            st = rng[e]
            for t in range(steps):
                out[e, t] = xe
                a = alpha_of(th, alpha0, alpha_amp)
                xe = step_x(xe, a)
                if skew:
                    th = (th << 2) | (splitmix64(&st) >> 62)
            x[e] = xe
            theta[e] = th
            rng[e] = st


def return_times(double[::1] x, uint64_t[::1] theta, uint64_t[::1] rng,
                 double alpha0, double alpha_amp, int64_t cap, double floor):
    """First return time of each start point to (1/2, 1].

    Entries are -1 for censored orbits (no return within ``cap`` steps, or the
    orbit fell below ``floor``).  ``x``/``theta``/``rng`` are overwritten with the
    landing state.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] res = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] r = res
    cdef Py_ssize_t e
    cdef int64_t k
    cdef double xe, a
    cdef uint64_t th, st
    cdef bint skew = alpha_amp != 0.0
    with nogil:
        for e in range(n):
            xe = x[e]
            th = theta[e]
            st = rng[e]
            r[e] = -1
            k = 0
            while k < cap:
                a = alpha_of(th, alpha0, alpha_amp)
                xe = step_x(xe, a)
                if skew:
                    th = (th << 2) | (splitmix64(&st) >> 62)
                k += 1
                if xe > 0.5:
                    r[e] = k
                    break
                if xe < floor:
                    break
            x[e] = xe
            theta[e] = th
            rng[e] = st
    return res
