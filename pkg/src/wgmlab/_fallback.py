"""Pure numpy twins of the routines in ``_kernels.pyx``.

Loops run over time and vectorise over orbits, so they are only competitive
for large ensembles.  The splitmix64 stream and the theta bit-shift are
reproduced exactly.  Single steps agree with the compiled path to a few ulp
(``pow`` versus numpy's vectorised power); along chaotic orbits those ulp
differences grow, so long x-histories differ pointwise while return times
and all statistics agree.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M64 = 2.0**-64


def _splitmix64(state):
    # state is advanced in place; returns the output word
    state += _GOLDEN
    z = state.copy()
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _alpha(theta, alpha0, alpha_amp):
    if alpha_amp == 0.0:
        return alpha0
    s = np.sin(np.pi * (theta.astype(np.float64) * _TWO_M64))
    return alpha0 + alpha_amp * s * s


def _step_x(x, a):
    left = x <= 0.5
    out = 2.0 * x - 1.0
    xl = x[left]
    al = a[left] if np.ndim(a) else a
    out[left] = xl * (1.0 + np.power(2.0 * xl, al))
    return out


def orbit_block(x, theta, rng, alpha0, alpha_amp, out):
    skew = alpha_amp != 0.0
    xe = x.copy()
    th = theta.copy()
    st = rng.copy()
    with np.errstate(over="ignore"):
        for t in range(out.shape[1]):
            out[:, t] = xe
            a = _alpha(th, alpha0, alpha_amp)
            xe = _step_x(xe, a)
            if skew:
                th = (th << np.uint64(2)) | (_splitmix64(st) >> np.uint64(62))
    x[:] = xe
    theta[:] = th
    rng[:] = st


def return_times(x, theta, rng, alpha0, alpha_amp, cap, floor):
    skew = alpha_amp != 0.0
    n = x.shape[0]
    res = np.full(n, -1, dtype=np.int64)
    active = np.arange(n)
    xe = x.copy()
    th = theta.copy()
    st = rng.copy()
    k = 0
    with np.errstate(over="ignore"):
        while active.size and k < cap:
            a = _alpha(th[active], alpha0, alpha_amp)
            xa = _step_x(xe[active], a)
            xe[active] = xa
            if skew:
                s = st[active]
                th[active] = (th[active] << np.uint64(2)) | (_splitmix64(s) >> np.uint64(62))
                st[active] = s
            k += 1
            hit = xa > 0.5
            res[active[hit]] = k
            active = active[~hit & (xa >= floor)]
    x[:] = xe
    theta[:] = th
    rng[:] = st
    return res
