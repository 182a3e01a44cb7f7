"""Backend selection for the orbit kernels.

The compiled extension is used when importable; ``WGMLAB_PURE_PYTHON=1`` forces
the numpy fallback.  ``BACKEND`` records which one is live.
"""

import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("WGMLAB_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")


def _check_state(x, theta, rng):
    # the compiled loops index all three arrays by orbit without bounds checks
    if not (x.ndim == theta.ndim == rng.ndim == 1 and x.shape == theta.shape == rng.shape):
        raise ValueError("x, theta and rng must be 1-d arrays of equal length")


def orbit_block(x, theta, rng, alpha0, alpha_amp, steps, backend=None):
    """Advance orbits ``steps`` times, returning the (n_orbits, steps) x-history.

    The state arrays are updated in place, so successive calls continue the
    same orbits.
    """
    _check_state(x, theta, rng)
    out = np.empty((x.shape[0], steps), dtype=np.float64)
    _impl(backend).orbit_block(x, theta, rng, float(alpha0), float(alpha_amp), out)
    return out


def return_times(x, theta, rng, alpha0, alpha_amp, cap, floor=1e-14, backend=None):
    """First-return times to (1/2, 1]; ``-1`` marks censored starts."""
    _check_state(x, theta, rng)
    return _impl(backend).return_times(
        x, theta, rng, float(alpha0), float(alpha_amp), int(cap), float(floor)
    )
