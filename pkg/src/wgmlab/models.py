"""Example systems: finite oracle models, intermittent maps, the skew product.

Interval systems share a small protocol used by the expansion check, the
tower projection and the Monte Carlo estimators::

    f(x)            one step of the map (vectorised)
    in_base(x)      membership of the inducing set
    sample_base     reference-measure samples on the inducing set
    induced(x)      (F(x), R(x)) for base points
    symbol(x)       partition element of a base point
    dist(x, y)      metric
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .errors import ModelError, UnsupportedOperation
from .symbolic import (SymbolicModel, check_aperiodicity, check_coprime_block,
                       check_gibbs)
from .tower import TowerModel, build_tower, invariant_density


# -- finite oracles ---------------------------------------------------------


def _o1() -> SymbolicModel:
    return SymbolicModel(
        images=[[0, 1], [0, 1, 2], [0, 1]],
        return_time=[1, 2, 3],
        element_mass=[0.5, 0.25, 0.25],
        beta=0.5,
        name="oracle-o1",
    )


def _o2() -> SymbolicModel:
    return SymbolicModel(
        images=[[0, 1, 2, 3], [0, 1], [0, 1, 2], [0, 1, 2, 3]],
        return_time=[1, 2, 4, 8],
        element_mass=[0.5, 0.25, 0.125, 0.125],
        beta=0.5,
        name="oracle-o2",
    )


def _full_shift() -> SymbolicModel:
    return SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 1],
                         element_mass=[0.5, 0.5], beta=0.5, name="full-shift")


_ORACLES = {"oracle-o1": _o1, "oracle-o2": _o2, "full-shift": _full_shift}


class OracleLine:
    """Affine realization of a finite tower on a line.

    Level ``l`` of the tower occupies ``[off_l, off_l + m(Delta_l))`` with the
    columns of the symbols with ``R > l`` laid out in order.  Symbol ``i`` of
    the base is ``[a_i, a_i + m_i)`` and ``F`` maps it affinely onto the
    (contiguous) union of its image symbols.  ``f`` climbs the tower or applies
    ``F`` at the top, so ``pi`` is the position map.
    """

    def __init__(self, tower: TowerModel):
        base = tower.base
        if not base.markov_jacobian:
            raise UnsupportedOperation("line realization needs a depth-1 Jacobian")
        for i, img in enumerate(base.images):
            if list(img) != list(range(img[0], img[-1] + 1)):
                raise UnsupportedOperation(f"images[{i}] is not a contiguous block")
        self.tower = tower
        self.base = base
        m = base.element_mass
        R = base.return_time
        self.a = np.concatenate([[0.0], np.cumsum(m)[:-1]])
        self.M = float(m.sum())
        self.img_start = self.a[[img[0] for img in base.images]]
        self.J = base.image_mass / m
        L = tower.levels
        self.off = np.concatenate([[0.0], np.cumsum(tower.level_mass)[:-1]])
        # start of column i inside level l
        self.col = np.full((L, base.alphabet_size), np.nan)
        for lev in range(L):
            pos = 0.0
            for i in range(base.alphabet_size):
                if R[i] > lev:
                    self.col[lev, i] = pos
                    pos += m[i]
        self.length = float(tower.level_mass.sum())
        self.beta = base.beta
        self.expansion_constant = 2.0

    # coordinates of symbolic objects
    def cylinder_interval(self, word):
        """``[lo, hi)`` of the base cylinder of ``word``."""
        lo = 0.0
        scale = 1.0
        for k, s in enumerate(word):
            lo += scale * self.a[s]
            if k + 1 < len(word):
                # inverse branch of F restricted to symbol s
                lo -= scale * self.img_start[s] / self.J[s]
                scale /= self.J[s]
        # length is the cylinder mass
        return lo, lo + self.base.cylinder_mass(tuple(word))

    def coordinate(self, itinerary, level: int = 0):
        lo, hi = self.cylinder_interval(itinerary)
        x = 0.5 * (lo + hi)
        return self.lift(x, level)

    def lift(self, x, level):
        x = np.asarray(x, float)
        i = self.symbol(x)
        return self.off[level] + self.col[level, i] + (x - self.a[i])

    def locate(self, y):
        """Level, symbol and base coordinate of line points."""
        y = np.asarray(y, float)
        lev = np.searchsorted(self.off, y, side="right") - 1
        u = y - self.off[lev]
        col = self.col[lev]
        starts = np.where(np.isnan(col), np.inf, col)
        # symbols with a column at this level, by start position
        i = np.empty(y.shape, dtype=np.int64)
        for idx in np.ndindex(y.shape):
            row = starts[idx]
            k = np.flatnonzero(row <= u[idx])
            i[idx] = k[np.argmax(row[k])]
        x = self.a[i] + (u - self.col[lev, i])
        return lev, i, x

    def f(self, y):
        lev, i, x = self.locate(y)
        R = self.base.return_time[i]
        up = lev + 1 < R
        out = np.empty_like(np.asarray(y, float))
        out = np.where(up, self.off[np.minimum(lev + 1, len(self.off) - 1)]
                       + self.col[np.minimum(lev + 1, len(self.off) - 1), i]
                       + (x - self.a[i]), 0.0)
        Fx = self.img_start[i] + (x - self.a[i]) * self.J[i]
        return np.where(up, out, self.lift(Fx, 0) if np.ndim(Fx) else self.lift(Fx, 0))

    # metric protocol on the base
    def in_base(self, x):
        x = np.asarray(x, float)
        return (x >= 0) & (x < self.M)

    def sample_base(self, rng, n):
        return rng.uniform(0.0, self.M, n)

    def symbol(self, x):
        x = np.asarray(x, float)
        return np.clip(np.searchsorted(self.a, x, side="right") - 1, 0, len(self.a) - 1)

    def induced(self, x):
        i = self.symbol(x)
        return self.img_start[i] + (x - self.a[i]) * self.J[i], self.base.return_time[i]

    @staticmethod
    def dist(x, y):
        return np.abs(np.asarray(x) - np.asarray(y))

    def transfer_matrix(self, depth: int):
        """Transfer of Lebesgue mass between depth-``depth`` cells of the line,
        computed from interval images of ``f``."""
        chain = self.tower.cell_chain(depth)
        lo = np.empty(chain.n_cells)
        hi = np.empty(chain.n_cells)
        for c in range(chain.n_cells):
            w = chain.words[chain.word_index[c]]
            a, b = self.cylinder_interval(w)
            lo[c] = self.lift(a, chain.level[c])
            hi[c] = lo[c] + (b - a)
        # image of a cell is the affine image of its interior
        order = np.argsort(lo)
        P = np.zeros((chain.n_cells, chain.n_cells))
        for c in range(chain.n_cells):
            eps = 1e-9 * (hi[c] - lo[c])
            ya, yb = self.f(np.array([lo[c] + eps, hi[c] - eps]))
            # extend back to the true endpoints (affine)
            slope = (yb - ya) / (hi[c] - lo[c] - 2 * eps)
            ia, ib = ya - slope * eps, yb + slope * eps
            width = ib - ia
            for d in order:
                ov = min(ib, hi[d]) - max(ia, lo[d])
                if ov > 1e-15 * width:
                    P[c, d] = ov / width
        return P, lo, hi


@dataclass
class OracleModel:
    model: SymbolicModel
    tower: TowerModel
    line: OracleLine | None

    @property
    def name(self):
        return self.model.name

    def density(self, depth: int = 2):
        return invariant_density(self.tower, depth)

    def report(self):
        return {
            "aperiodicity": check_aperiodicity(self.model),
            "coprime_block": check_coprime_block(self.model),
            "gibbs": check_gibbs(self.model, 3),
        }


def make_oracle(spec_id: str) -> OracleModel:
    if spec_id not in _ORACLES:
        raise ModelError(f"unknown oracle id {spec_id!r}; known: {sorted(_ORACLES)}")
    model = _ORACLES[spec_id]()
    return oracle_from_model(model)


def oracle_from_model(model: SymbolicModel) -> OracleModel:
    tower = build_tower(model, tail_tol=0.0)
    try:
        line = OracleLine(tower)
    except UnsupportedOperation:
        line = None
    object.__setattr__(tower, "system", line)
    return OracleModel(model, tower, line)


# -- interval maps ------------------------------------------------------------


def intermittent_step(x, alpha):
    """``x (1 + 2^a x^a)`` on ``[0, 1/2]`` and ``2x - 1`` on ``(1/2, 1]``."""
    x = np.asarray(x, float)
    return np.where(x <= 0.5, x * (1.0 + np.power(2.0, alpha) * np.power(x, alpha)),
                    2.0 * x - 1.0)


class _ReturnTimes:
    """First-return inducing to ``(1/2, 1]`` through the orbit kernels."""

    alpha0 = 0.5
    alpha_amp = 0.0
    cap = 10**7
    floor = 1e-14

    def _returns_from_u(self, u, theta, stream, cap, floor):
        # u = 2x - 1 is the image of the base point after its first (affine) step;
        # starting there keeps full relative precision for tiny u
        u = np.array(u, dtype=float, copy=True)
        R = np.ones(u.size, dtype=np.int64)
        low = u <= 0.5
        if low.any():
            r = kernels.return_times(u[low], theta[low], stream[low], self.alpha0,
                                     self.alpha_amp, cap - 1, floor)
            R[low] = np.where(r < 0, -1, r + 1)
        return R

    def escape_cutoff(self, n_max: int) -> float:
        """Largest ``u`` (to bisection accuracy) with ``R > n_max`` for every
        ``theta``: with the exponent frozen at its minimum the orbit escapes
        fastest, so this lower-bounds every return time below the cutoff."""
        z = np.zeros(1, dtype=np.uint64)
        lo, hi = -700.0, 0.0  # natural log of u
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            x = np.array([math.exp(mid)])
            r = kernels.return_times(x, z.copy(), z.copy(), self.alpha0, 0.0, n_max, 0.0)[0]
            if r < 0:  # no return within n_max - 1 steps after the first
                lo = mid
            else:
                hi = mid
        return math.exp(lo)

    def sample_return_times(self, n, seed=0, cap=None, u_min=None):
        """Return times of base points, optionally importance sampled.

        With ``u_min`` set, ``u = 2x - 1`` is drawn log-uniformly on
        ``[u_min, 1]`` and the likelihood ratio to Lebesgue is returned as a
        weight; otherwise ``u`` is uniform and all weights equal 1.  Censored
        samples have ``R = -1``.
        """
        cap = self.cap if cap is None else cap
        rng = np.random.default_rng(seed)
        if u_min is None:
            u = 1.0 - rng.uniform(0.0, 1.0, n)
            w = np.ones(n)
        else:
            u = np.exp(rng.uniform(math.log(u_min), 0.0, n))
            w = u * math.log(1.0 / u_min)
        theta = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False)
        stream = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False)
        R = self._returns_from_u(u, theta, stream, cap, self.floor)
        return R, w

    def tail_survival(self, n_grid, samples=10**6, seed=0, importance=True):
        """Estimate ``m{R > n}`` (base measure normalised to 1) on ``n_grid``.

        With ``importance`` the starts below :meth:`escape_cutoff` are not
        sampled; their mass ``u_min`` is added exactly.  Returns
        ``(survival, stderr, censored_fraction)``.
        """
        n_grid = np.asarray(n_grid, dtype=np.int64)
        n_max = int(n_grid.max())
        if importance:
            u_min = self.escape_cutoff(n_max)
            R, w = self.sample_return_times(samples, seed, cap=n_max + 1, u_min=u_min)
            w = w * (1.0 - u_min)
        else:
            u_min = 0.0
            R, w = self.sample_return_times(samples, seed, cap=n_max + 1)
        R = np.where(R < 0, n_max + 1, R)  # censored at the cap: R > n_max
        ind = R[None, :] > n_grid[:, None]
        vals = ind * w[None, :]
        surv = vals.mean(axis=1) + u_min
        err = vals.std(axis=1, ddof=1) / math.sqrt(samples)
        return surv, err, float(np.mean(R > n_max))


class IntermittentMap(_ReturnTimes):
    """Constant-exponent intermittent map on ``[0, 1]``, induced on ``(1/2, 1]``."""

    beta = 0.5
    expansion_constant = 2.0

    def __init__(self, alpha: float):
        if not 0 < alpha < 1:
            raise ModelError("alpha must lie in (0, 1)")
        self.alpha = float(alpha)
        self.alpha0 = float(alpha)
        self.name = f"pm-const-{alpha:g}"

    @property
    def tail_exponent(self):
        return 1.0 / self.alpha

    def f(self, x):
        return intermittent_step(x, self.alpha)

    def in_base(self, x):
        x = np.asarray(x, float)
        return (x > 0.5) & (x <= 1.0)

    def sample_base(self, rng, n):
        return 1.0 - rng.uniform(0.0, 0.5, n)

    def induced(self, x, cap=None):
        x = np.array(x, dtype=float, copy=True).ravel()
        n = x.size
        z = np.zeros(n, dtype=np.uint64)
        R = kernels.return_times(x, z.copy(), z.copy(), self.alpha, 0.0,
                                 self.cap if cap is None else cap, self.floor)
        x[R < 0] = np.nan
        return x, R

    def symbol(self, x):
        # first-return partition: elements are the level sets of R
        return self.induced(x)[1]

    @staticmethod
    def dist(x, y):
        return np.abs(np.asarray(x) - np.asarray(y))

    def coordinate(self, x):
        return x

    def orbit(self, x0, steps):
        x = np.array(x0, dtype=float, copy=True).ravel()
        z = np.zeros(x.size, dtype=np.uint64)
        return kernels.orbit_block(x, z.copy(), z.copy(), self.alpha, 0.0, steps)


class DoublingMap:
    """``x -> 2x mod 1`` with ``R = 1`` and the two halves as partition."""

    beta = 0.5
    expansion_constant = 2.0
    name = "doubling"

    def f(self, x):
        return np.mod(2.0 * np.asarray(x, float), 1.0)

    def in_base(self, x):
        x = np.asarray(x, float)
        return (x >= 0) & (x < 1)

    def sample_base(self, rng, n):
        return rng.uniform(0.0, 1.0, n)

    def induced(self, x):
        return self.f(x), np.ones(np.shape(x), dtype=np.int64)

    def symbol(self, x):
        return (np.asarray(x) >= 0.5).astype(np.int64)

    @staticmethod
    def dist(x, y):
        return np.abs(np.asarray(x) - np.asarray(y))

    def coordinate(self, x):
        return x


class SkewProduct(_ReturnTimes):
    """``(theta, x) -> (4 theta, f_{alpha(theta)}(x))`` with
    ``alpha(theta) = alpha0 + alpha_amp sin^2(pi theta)``."""

    def __init__(self, alpha0: float = 0.45, alpha_amp: float = 0.15):
        if not (0 < alpha0 and alpha_amp > 0 and alpha0 + alpha_amp < 1):
            raise ModelError("need 0 < alpha_min < alpha_max < 1")
        self.alpha0 = float(alpha0)
        self.alpha_amp = float(alpha_amp)
        self.name = "skew-default" if (alpha0, alpha_amp) == (0.45, 0.15) else \
            f"skew-{alpha0:g}-{alpha_amp:g}"

    @property
    def alpha_min(self):
        return self.alpha0

    @property
    def alpha_max(self):
        return self.alpha0 + self.alpha_amp

    @property
    def tail_exponent(self):
        return 1.0 / self.alpha_max

    def alpha(self, theta):
        s = np.sin(np.pi * np.asarray(theta, float))
        return self.alpha0 + self.alpha_amp * s * s

    def skew_step(self, theta, x):
        theta = np.asarray(theta, float)
        return np.mod(4.0 * theta, 1.0), intermittent_step(x, self.alpha(theta))

    def f(self, state):
        theta, x = state
        return self.skew_step(theta, x)

    def coordinate(self, state):
        return state

    def induced_return(self, theta, x, seed=0, cap=None):
        """First return of ``x`` to ``(1/2, 1]``.

        ``theta`` is carried as a 64-bit binary fraction; bits beyond the
        input's precision are drawn from a seeded stream.  Returns
        ``(theta', x', R)`` with ``R = -1`` for censored points.
        """
        x = np.array(x, dtype=float, copy=True).ravel()
        th = np.broadcast_to(np.asarray(theta, float), x.shape) if np.ndim(theta) == 0 \
            else np.asarray(theta, float).ravel()
        if th.shape != x.shape:
            raise ModelError("theta and x must have the same length")
        bits = np.array([int(t * 2.0**64) % 2**64 for t in th], dtype=np.uint64)
        rng = np.random.default_rng(seed)
        stream = rng.integers(0, 2**64, x.size, dtype=np.uint64, endpoint=False)
        R = kernels.return_times(x, bits, stream, self.alpha0, self.alpha_amp,
                                 self.cap if cap is None else cap, self.floor)
        return bits.astype(float) * 2.0**-64, x, R


# -- catalog ------------------------------------------------------------------

CATALOG = ("oracle-o1", "oracle-o2", "full-shift", "skew-default", "pm-const-<alpha>",
           "doubling")


def make_model(spec_id: str):
    """Return the catalog model for ``spec_id``."""
    if spec_id in _ORACLES:
        return make_oracle(spec_id)
    if spec_id == "skew-default":
        return SkewProduct()
    if spec_id == "doubling":
        return DoublingMap()
    m = re.fullmatch(r"pm-const-([0-9.]+)", spec_id)
    if m:
        return IntermittentMap(float(m.group(1)))
    raise ModelError(f"unknown model id {spec_id!r}; known: {', '.join(CATALOG)}")


def constant_alpha_model(alpha: float) -> IntermittentMap:
    return IntermittentMap(alpha)
