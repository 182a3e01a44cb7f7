"""Finite-alphabet weak Gibbs Markov models and checks of their hypotheses.

A model is described by its partition symbols ``0..n-1``, the Markov image of
each symbol (a set of symbols whose union is ``F(omega_i)``), return times,
reference masses and a Jacobian.  Points are itineraries: sequences of
symbols in which every symbol lies in the image of its predecessor.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import InsufficientResolution, ModelError, UnsupportedOperation

Word = tuple[int, ...]


class AtLeast(int):
    """Separation time that was not resolved before the cap."""

    def __repr__(self):
        return f"≥{int(self)}"

    __str__ = __repr__


@dataclass(frozen=True, eq=False)
class SymbolicModel:
    """Induced WGM map on a finite partition.

    Parameters
    ----------
    images : sequence of sequences of int
        ``images[i]`` lists the symbols whose union is ``F(omega_i)``.
    return_time : sequence of int
        ``R(omega_i) >= 1``.
    element_mass : sequence of float
        Reference measure ``m(omega_i) > 0``.
    beta, gibbs_constant, delta0 : float
        Constants of the Gibbs and long-branch conditions.  ``delta0`` defaults
        to the smallest image mass.
    jacobian : callable, optional
        Maps a word of length ``jacobian_depth`` to ``J_F`` on that cylinder.
        The default is ``m(F(omega_i)) / m(omega_i)`` on each symbol, which
        makes the nonsingularity condition exact.
    separable : bool
        Assumption flag for the separability condition, which has no finite test.
    """

    images: tuple
    return_time: np.ndarray
    element_mass: np.ndarray
    beta: float = 0.5
    gibbs_constant: float = 1.0
    delta0: float | None = None
    jacobian: Callable[[Word], float] | None = None
    jacobian_depth: int = 1
    separable: bool = True
    name: str = "model"
    _cyl_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        images = tuple(tuple(sorted(set(int(j) for j in img))) for img in self.images)
        R = np.asarray(self.return_time, dtype=np.int64)
        m = np.asarray(self.element_mass, dtype=np.float64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "return_time", R)
        object.__setattr__(self, "element_mass", m)
        n = len(images)
        if n == 0:
            raise ModelError("empty model")
        if R.shape != (n,) or m.shape != (n,):
            raise ModelError("images, return_time and element_mass must have equal length")
        for i, img in enumerate(images):
            if not img:
                raise ModelError(f"images[{i}] is empty")
            if min(img) < 0 or max(img) >= n:
                raise ModelError(f"images[{i}] refers to an unknown symbol")
        if np.any(R < 1):
            raise ModelError("return times must be >= 1")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ModelError("element masses must be positive and finite")
        if not 0 < self.beta < 1:
            raise ModelError("beta must lie in (0, 1)")
        if self.gibbs_constant <= 0:
            raise ModelError("gibbs_constant must be positive")
        img_mass = self.image_mass
        if self.delta0 is None:
            object.__setattr__(self, "delta0", float(img_mass.min()))
        elif self.delta0 <= 0:
            raise ModelError("delta0 must be positive")
        bad = np.flatnonzero(img_mass < self.delta0 * (1 - 1e-12))
        if bad.size:
            raise ModelError(f"long-branch condition fails for symbols {bad.tolist()}")
        if self.jacobian_depth < 1:
            raise ModelError("jacobian_depth must be >= 1")

    # -- basic structure -------------------------------------------------

    @property
    def alphabet_size(self) -> int:
        return len(self.images)

    @cached_property
    def transition(self) -> np.ndarray:
        """0/1 matrix with ``A[i, j] = 1`` iff ``j`` is in ``images[i]``."""
        n = self.alphabet_size
        A = np.zeros((n, n), dtype=np.int64)
        for i, img in enumerate(self.images):
            A[i, list(img)] = 1
        return A

    @cached_property
    def image_mass(self) -> np.ndarray:
        return self.transition @ self.element_mass

    @cached_property
    def markov_matrix(self) -> np.ndarray:
        """Conditional law of the next symbol under the reference measure.

        Exact when the Jacobian is constant on each symbol.
        """
        return self.transition * self.element_mass[None, :] / self.image_mass[:, None]

    def jacobian_of(self, word: Sequence[int]) -> float:
        """``J_F`` on the cylinder of ``word`` (needs ``jacobian_depth`` symbols)."""
        if len(word) < self.jacobian_depth:
            raise InsufficientResolution(
                f"Jacobian needs {self.jacobian_depth} symbols, got {len(word)}"
            )
        if self.jacobian is None:
            i = word[0]
            return float(self.image_mass[i] / self.element_mass[i])
        return float(self.jacobian(tuple(word[: self.jacobian_depth])))

    @property
    def markov_jacobian(self) -> bool:
        return self.jacobian is None or self.jacobian_depth == 1

    def is_admissible(self, word: Sequence[int]) -> bool:
        n = self.alphabet_size
        if any(not 0 <= s < n for s in word):
            return False
        return all(b in self.images[a] for a, b in zip(word, word[1:]))

    def words(self, depth: int, first: int | None = None) -> np.ndarray:
        """All admissible words of length ``depth`` in lexicographic order."""
        if depth < 1:
            raise ValueError("depth must be >= 1")
        starts = range(self.alphabet_size) if first is None else [first]
        cur = [(s,) for s in starts]
        for _ in range(depth - 1):
            cur = [w + (j,) for w in cur for j in self.images[w[-1]]]
        return np.array(cur, dtype=np.int64).reshape(len(cur), depth)

    def cylinder_mass(self, word: Sequence[int]) -> float:
        """Reference mass of the cylinder ``[w0 w1 ... wk]``.

        Uses ``m([w0..wk]) = m([w1..wk]) / J_F([w0..])`` which follows from the
        nonsingularity condition when ``J_F`` is constant on the cylinder.
        """
        word = tuple(int(s) for s in word)
        if len(word) == 1:
            return float(self.element_mass[word[0]])
        cached = self._cyl_cache.get(word)
        if cached is not None:
            return cached
        if not self.is_admissible(word):
            raise ModelError(f"word {word} is not admissible")
        if len(word) < self.jacobian_depth:
            # sum over admissible extensions
            val = sum(self.cylinder_mass(word + (j,)) for j in self.images[word[-1]])
        else:
            val = self.cylinder_mass(word[1:]) / self.jacobian_of(word)
        self._cyl_cache[word] = val
        return val

    def check_consistency(self, depth: int | None = None, rtol=1e-9) -> float:
        """Largest relative defect of ``m(omega_i) = sum_j m([i j])``."""
        worst = 0.0
        for i in range(self.alphabet_size):
            tot = sum(self.cylinder_mass((i, j)) for j in self.images[i])
            worst = max(worst, abs(tot - self.element_mass[i]) / self.element_mass[i])
        if worst > rtol:
            raise ModelError(f"Jacobian inconsistent with masses (relative defect {worst:.3g})")
        return worst


# -- separation times ----------------------------------------------------


def separation_time(x: Sequence[int], y: Sequence[int], cap: int = 64):
    """First index at which the itineraries differ.

    Returns an ``int``, or ``AtLeast(cap)`` when the two agree on the first
    ``cap`` symbols.
    """
    n = min(len(x), len(y), cap)
    for k in range(n):
        if x[k] != y[k]:
            return k
    if n < cap:
        raise InsufficientResolution(
            f"itineraries agree on all {n} available symbols but cap is {cap}"
        )
    return AtLeast(cap)


def _first_mismatch(words: np.ndarray) -> np.ndarray:
    """Pairwise first-mismatch index (``depth`` when equal) for rows of ``words``."""
    k, d = words.shape
    diff = words[:, None, :] != words[None, :, :]
    any_diff = diff.any(axis=2)
    first = np.argmax(diff, axis=2)
    return np.where(any_diff, first, d)


# -- Gibbs condition -----------------------------------------------------


@dataclass
class GibbsReport:
    depth: int
    max_ratio: float
    tightest_constant: float
    violations: list
    passes: bool


def check_gibbs(model: SymbolicModel, depth: int = 2) -> GibbsReport:
    """Test ``log J(x)/J(y) <= C_F beta^s(Fx, Fy)`` on cylinder pairs.

    Pairs of depth-``depth`` cylinders inside a common partition element are
    enumerated; for a pair whose words first differ at index ``k >= 1`` the
    images separate at ``s(Fx, Fy) = k - 1``.
    """
    depth = max(depth, model.jacobian_depth, 2)
    max_ratio = 0.0
    tight = 0.0
    violations = []
    for i in range(model.alphabet_size):
        W = model.words(depth, first=i)
        J = np.array([model.jacobian_of(tuple(w)) for w in W])
        if np.any(~(J > 0)) or not np.all(np.isfinite(J)):
            raise ModelError(f"non-positive Jacobian on a cylinder of symbol {i}")
        if len(W) < 2:
            continue
        logJ = np.log(J)
        lr = logJ[:, None] - logJ[None, :]
        s = _first_mismatch(W[:, 1:])
        distinct = s < depth - 1
        if not distinct.any():
            continue
        bound = model.beta ** s.astype(float)
        r = np.where(distinct, lr, 0.0)
        max_ratio = max(max_ratio, float(r.max()))
        tight = max(tight, float((r / bound).max()))
        bad = np.argwhere(distinct & (lr > model.gibbs_constant * bound * (1 + 1e-12)))
        for a, b in bad:
            violations.append(
                (tuple(W[a].tolist()), tuple(W[b].tolist()), float(lr[a, b]))
            )
    return GibbsReport(depth, max_ratio, tight, violations, math.isfinite(tight))


# -- aperiodicity and coprime blocks ------------------------------------


@dataclass
class AperiodicityReport:
    k0: int | None
    horizon: int

    @property
    def ok(self) -> bool:
        return self.k0 is not None


def check_aperiodicity(model: SymbolicModel, horizon: int = 64) -> AperiodicityReport:
    """Least ``k0`` with ``A^n > 0`` for every ``k0 <= n <= horizon``."""
    n = model.alphabet_size
    if horizon < n:
        warnings.warn(
            f"horizon {horizon} < alphabet size {n}: primitivity may be undetectable",
            stacklevel=2,
        )
    A = (model.transition > 0).astype(np.int64)
    P = np.eye(n, dtype=np.int64)
    positive = []
    for _ in range(horizon):
        P = np.minimum(P @ A, 1)
        positive.append(bool(P.all()))
    if not positive or not positive[-1]:
        return AperiodicityReport(None, horizon)
    k0 = horizon
    while k0 > 1 and positive[k0 - 2]:
        k0 -= 1
    return AperiodicityReport(k0, horizon)


@dataclass
class CoprimeBlockReport:
    block: tuple | None

    @property
    def ok(self) -> bool:
        return self.block is not None


def check_coprime_block(model: SymbolicModel) -> CoprimeBlockReport:
    """First block (by size, then lexicographically) with coprime return times
    whose every member's image covers the block."""
    n = model.alphabet_size
    img = [set(s) for s in model.images]
    R = model.return_time
    for size in range(2, n + 1):
        for block in itertools.combinations(range(n), size):
            if math.gcd(*(int(R[i]) for i in block)) != 1:
                continue
            bs = set(block)
            if all(bs <= img[i] for i in block):
                return CoprimeBlockReport(block)
    return CoprimeBlockReport(None)


# -- expansion (metric models) ------------------------------------------


@dataclass
class ExpansionReport:
    pairs: int
    constant_separation: float  # tightest C in d(Fx, Fy) <= C beta^s(x, y)
    constant_climb: float  # tightest C in d(f^j x, f^j y) <= C d(Fx, Fy)
    tightest_constant: float
    violations: int
    skipped: int

    @property
    def passes(self) -> bool:
        return self.violations == 0


def check_expansion(system, samples: int = 1000, seed=0, constant=None,
                    beta=None, cap: int = 48) -> ExpansionReport:
    """Monte Carlo test of the expanding-induced-map conditions.

    ``system`` must expose ``sample_base``, ``induced``, ``symbol``, ``f`` and
    ``dist`` (see :mod:`wgmlab.models`).  Pairs are drawn inside a common
    partition element at log-uniform distances.
    """
    for attr in ("sample_base", "induced", "symbol", "f", "dist"):
        if not hasattr(system, attr):
            raise UnsupportedOperation(f"model has no metric structure ({attr} missing)")
    rng = np.random.default_rng(seed)
    beta = system.beta if beta is None else beta
    C = getattr(system, "expansion_constant", 2.0) if constant is None else constant

    x = system.sample_base(rng, samples)
    delta = np.exp(rng.uniform(np.log(1e-10), np.log(1e-2), samples))
    delta *= rng.choice([-1.0, 1.0], samples)
    y = x + delta
    ok = system.in_base(y) & (system.symbol(y) == system.symbol(x))
    x, y = x[ok], y[ok]
    skipped = samples - x.size

    Fx, Rx = system.induced(x)
    Fy, Ry = system.induced(y)
    # separation time: iterate F while symbols agree
    s = np.zeros(x.size, dtype=np.int64)
    alive = np.ones(x.size, dtype=bool)
    a, b = x.copy(), y.copy()
    for k in range(cap):
        same = system.symbol(a[alive]) == system.symbol(b[alive])
        idx = np.flatnonzero(alive)
        s[idx[~same]] = k
        alive[idx[~same]] = False
        if not alive.any():
            break
        a[alive], _ = system.induced(a[alive])
        b[alive], _ = system.induced(b[alive])
    s[alive] = cap

    dF = system.dist(Fx, Fy)
    c_sep = float(np.max(dF / beta ** s.astype(float))) if x.size else 0.0

    # climb condition along the first R iterates
    c_climb = 0.0
    viol_climb = np.zeros(x.size, dtype=bool)
    same_R = Rx == Ry
    a, b = x.copy(), y.copy()
    rmax = int(Rx[same_R].max()) if same_R.any() else 0
    safe_dF = np.where(dF > 0, dF, np.inf)
    for j in range(rmax + 1):
        live = same_R & (j <= Rx)
        ratio = system.dist(a, b) / safe_dF
        r = np.where(live, ratio, 0.0)
        c_climb = max(c_climb, float(r.max(initial=0.0)))
        viol_climb |= r > C * (1 + 1e-9)
        a, b = system.f(a), system.f(b)
    viol_sep = dF > C * beta ** s.astype(float) * (1 + 1e-9)
    violations = int(np.count_nonzero(viol_sep | viol_climb))
    return ExpansionReport(int(x.size), c_sep, c_climb, max(c_sep, c_climb),
                           violations, int(skipped))
