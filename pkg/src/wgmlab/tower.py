"""Tower extension over an induced map and its invariant density.

For a finite model the tower is handled through *cells*: pairs ``(level,
word)`` where ``word`` is an admissible depth-``d`` itinerary of the level-0
ancestor.  When the Jacobian is constant on depth-``d`` cylinders the
transfer of the reference measure between cells is exact, which gives an
exact finite Markov chain for the tower dynamics on cylinder-measurable
densities.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import (ConvergenceError, HypothesisFailure, InsufficientResolution,
                     ModelError, OutOfRange, TruncationError, UnsupportedOperation)
from .symbolic import AtLeast, SymbolicModel, separation_time


class TowerPoint(NamedTuple):
    """``base`` is an itinerary (tuple of symbols) or a point of a metric base."""

    base: object
    level: int


@dataclass(frozen=True, eq=False)
class TowerModel:
    base: SymbolicModel | None
    height_cap: int
    level_mass: np.ndarray
    partition_eta: tuple
    truncated_mass: float = 0.0
    system: object = None  # metric realization, if any
    _chains: dict = field(default_factory=dict, repr=False)

    @property
    def levels(self) -> int:
        return len(self.level_mass)

    def return_time_of(self, itinerary) -> int:
        return int(self.base.return_time[itinerary[0]])

    def cell_chain(self, depth: int = 2) -> "CellChain":
        if self.base is None:
            raise UnsupportedOperation("tower was built from a tail sequence only")
        ch = self._chains.get(depth)
        if ch is None:
            ch = CellChain(self, depth)
            self._chains[depth] = ch
        return ch

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "symbol", "mass"])
        for lev, i in self.partition_eta:
            w.writerow([lev, i, repr(float(self.base.element_mass[i]))])
        return buf.getvalue()


def build_tower(base: SymbolicModel, height_cap: int | None = None,
                tail_tol: float = 1e-8, system=None) -> TowerModel:
    """Tower over ``base`` truncated at level ``height_cap``.

    ``level_mass[l] = sum_{i: R_i > l} m_i``.  Mass above the cap is
    ``sum_i m_i max(0, R_i - H - 1)`` and must not exceed ``tail_tol``.
    """
    R = base.return_time
    m = base.element_mass
    if height_cap is None:
        height_cap = int(R.max()) - 1
    if height_cap < 0:
        raise ModelError("height_cap must be >= 0")
    H = int(height_cap)
    trunc = float(np.sum(m * np.maximum(0, R - H - 1)))
    if trunc > tail_tol:
        raise TruncationError(
            f"mass above level {H} is {trunc:.3g} > tail_tol {tail_tol:.3g}", tail_mass=trunc
        )
    top = min(H, int(R.max()) - 1)
    level_mass = np.array([m[R > lev].sum() for lev in range(top + 1)])
    eta = tuple((lev, i) for lev in range(top + 1) for i in range(base.alphabet_size)
                if R[i] > lev)
    return TowerModel(base, H, level_mass, eta, trunc, system)


def tower_from_levels(level_mass, tail_mass: float = 0.0) -> TowerModel:
    """Tower known only through its level masses (for tail arithmetic)."""
    lm = np.asarray(level_mass, dtype=float)
    if lm.ndim != 1 or lm.size == 0 or np.any(lm < 0):
        raise ModelError("level_mass must be a non-empty non-negative sequence")
    if np.any(np.diff(lm) > 1e-15 * lm[0]):
        raise ModelError("level_mass must be non-increasing")
    return TowerModel(None, lm.size - 1, lm, (), float(tail_mass))


# -- dynamics on points ---------------------------------------------------


def _check_point(model, p):
    if model.base is not None:
        if len(p.base) == 0:
            raise InsufficientResolution("empty itinerary")
        R = model.return_time_of(p.base)
        if not 0 <= p.level < R:
            raise ModelError(f"level {p.level} outside 0..{R - 1}")
        return R
    return None


def tower_step(model: TowerModel, p: TowerPoint) -> TowerPoint:
    """One step of the tower map: climb, or return to level 0 by the induced map."""
    if model.base is None:
        if model.system is None:
            raise UnsupportedOperation("tower has no dynamics attached")
        Fx, R = model.system.induced(np.atleast_1d(np.asarray(p.base, float)))
        if p.level + 1 < R[0]:
            return TowerPoint(p.base, p.level + 1)
        return TowerPoint(float(Fx[0]), 0)
    R = _check_point(model, p)
    if p.level + 1 < R:
        return TowerPoint(p.base, p.level + 1)
    if len(p.base) < 2:
        raise InsufficientResolution("itinerary exhausted by the return")
    return TowerPoint(tuple(p.base[1:]), 0)


def tower_jacobian(model: TowerModel, p: TowerPoint) -> float:
    """``J_T``: 1 below the top of a column, ``J_F(x)`` at the top level."""
    R = _check_point(model, p)
    if p.level + 1 < R:
        return 1.0
    return model.base.jacobian_of(p.base)


def tower_separation(u: TowerPoint, v: TowerPoint, cap: int = 64):
    if u.level != v.level:
        return 0
    return separation_time(u.base, v.base, cap)


def project_pi(model: TowerModel, p: TowerPoint):
    """``pi(x, l) = f^l(x)`` through the attached metric realization."""
    sys_ = model.system
    if sys_ is None:
        raise UnsupportedOperation("no map f is attached to this tower")
    x = sys_.coordinate(p.base) if model.base is not None else p.base
    for _ in range(p.level):
        x = sys_.f(x)
    return x


def hat_R_tail(model: TowerModel, n: int) -> float:
    """``m{R_hat > n} = sum_{l > n} m(Delta_l)``; excludes the certified truncated mass."""
    if n < 0:
        raise OutOfRange("n must be >= 0")
    if n > model.height_cap:
        raise OutOfRange(f"n = {n} exceeds height_cap {model.height_cap}")
    lm = model.level_mass
    return float(lm[n + 1:].sum())


def hat_R_tail_array(model: TowerModel, n_max: int | None = None) -> np.ndarray:
    """Vector of ``m{R_hat > n}`` for ``n = 0..n_max``."""
    lm = model.level_mass
    tail = np.concatenate([np.cumsum(lm[::-1])[::-1][1:], [0.0]])
    if n_max is None:
        return tail
    out = np.zeros(n_max + 1)
    k = min(n_max + 1, tail.size)
    out[:k] = tail[:k]
    return out


# -- exact cell chain -------------------------------------------------------


class CellChain:
    """Exact Markov chain of the tower on depth-``d`` cells.

    ``Q[a, b]`` is the fraction of the reference mass of cell ``a`` that ``T``
    carries into cell ``b``.  Cell masses are ``m(cell) = m([word])``; the
    chain preserves densities that are constant on cells.
    """

    def __init__(self, tower: TowerModel, depth: int):
        base = tower.base
        if depth < base.jacobian_depth:
            raise InsufficientResolution(
                f"depth {depth} below Jacobian depth {base.jacobian_depth}"
            )
        self.tower = tower
        self.depth = depth
        words = base.words(depth)
        R = base.return_time
        lev_list, word_idx = [], []
        for lev in range(tower.levels):
            for k, w in enumerate(words):
                if R[w[0]] > lev:
                    lev_list.append(lev)
                    word_idx.append(k)
        self.words = words
        self.level = np.array(lev_list, dtype=np.int64)
        self.word_index = np.array(word_idx, dtype=np.int64)
        self.n_cells = self.level.size
        wmass = np.array([base.cylinder_mass(tuple(w)) for w in words])
        self.mass = wmass[self.word_index]
        self.symbol = words[self.word_index, 0]
        self._index = {(int(l), int(k)): c for c, (l, k) in enumerate(zip(self.level, self.word_index))}
        self._word_pos = {tuple(w.tolist()): k for k, w in enumerate(words)}
        self._wmass = wmass

    def cell_of(self, level: int, word) -> int:
        k = self._word_pos[tuple(int(s) for s in word[: self.depth])]
        return self._index[(int(level), k)]

    @cached_property
    def successors(self):
        """Per cell, arrays ``(targets, probabilities)`` of one tower step."""
        base = self.tower.base
        R = base.return_time
        out = []
        for c in range(self.n_cells):
            lev, w = int(self.level[c]), self.words[self.word_index[c]]
            if lev + 1 < R[w[0]]:
                out.append((np.array([self._index[(lev + 1, self.word_index[c])]]),
                            np.array([1.0])))
                continue
            tail = tuple(w[1:].tolist())
            if tail:
                ext = [tail + (x,) for x in base.images[tail[-1]]]
                denom = base.cylinder_mass(tail)
            else:
                ext = [(x,) for x in base.images[w[0]]]
                denom = float(base.image_mass[w[0]])
            tg = np.array([self._index[(0, self._word_pos[e])] for e in ext])
            pr = np.array([base.cylinder_mass(e) for e in ext]) / denom
            out.append((tg, pr))
        return out

    @cached_property
    def Q(self) -> np.ndarray:
        if self.n_cells > 6000:
            raise UnsupportedOperation(f"{self.n_cells} cells is too many for a dense chain")
        Q = np.zeros((self.n_cells, self.n_cells))
        for c, (tg, pr) in enumerate(self.successors):
            np.add.at(Q[c], tg, pr)
        return Q

    @cached_property
    def top(self) -> np.ndarray:
        """Cells whose next step is a return to level 0."""
        R = self.tower.base.return_time
        return self.level + 1 == R[self.symbol]

    def push(self, mu: np.ndarray, steps: int = 1) -> np.ndarray:
        """Push forward cell masses (or a stack of them, last axis = cells)."""
        for _ in range(steps):
            mu = mu @ self.Q
        return mu

    def transfer_density(self, h: np.ndarray, steps: int = 1) -> np.ndarray:
        """Transfer operator acting on cell-constant densities w.r.t. m."""
        return self.push(h * self.mass, steps) / self.mass


@dataclass
class InvariantDensity:
    chain: CellChain
    values: np.ndarray  # d nu / d m per cell
    upper_bound: float
    log_regularity_constant: float
    residual: float
    iterations: int

    @property
    def regularity_constant(self) -> float:
        """``C_rho`` with ``|rho(x) - rho(y)| <= C_rho beta^s(x, y)``."""
        return regularity_constant(self.chain, self.values, self.chain.tower.base.beta)

    @property
    def cell_measure(self) -> np.ndarray:
        return self.values * self.chain.mass

    def integrate(self, f_cells) -> float:
        return float(np.dot(np.asarray(f_cells, float), self.cell_measure))

    def to_csv(self) -> str:
        ch = self.chain
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "symbol", "address", "density"])
        for c in range(ch.n_cells):
            word = ch.words[ch.word_index[c]]
            w.writerow([int(ch.level[c]), int(word[0]), "".join(map(str, word.tolist())),
                        repr(float(self.values[c]))])
        return buf.getvalue()


def log_regularity(chain: CellChain, h: np.ndarray, beta: float) -> float:
    """Smallest ``C`` with ``|log h(a) - log h(b)| <= C beta^s(a, b)`` inside η-elements."""
    C = 0.0
    lh = np.log(h)
    keys = chain.level * chain.tower.base.alphabet_size + chain.symbol
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        if idx.size < 2:
            continue
        W = chain.words[chain.word_index[idx]]
        diff = W[:, None, :] != W[None, :, :]
        s = np.where(diff.any(2), np.argmax(diff, 2), chain.depth)
        d = np.abs(lh[idx][:, None] - lh[idx][None, :])
        mask = s < chain.depth
        if mask.any():
            C = max(C, float((d[mask] / beta ** s[mask]).max()))
    return C


def regularity_constant(chain: CellChain, h: np.ndarray, beta: float) -> float:
    """Smallest ``C`` with ``|h(a) - h(b)| <= C beta^s(a, b)`` for all cells.

    Cells in different η-elements have ``s = 0`` and contribute ``ptp(h)``.
    """
    h = np.asarray(h, dtype=float)
    C = float(np.ptp(h))
    keys = chain.level * chain.tower.base.alphabet_size + chain.symbol
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        if idx.size < 2:
            continue
        W = chain.words[chain.word_index[idx]]
        diff = W[:, None, :] != W[None, :, :]
        s = np.where(diff.any(2), np.argmax(diff, 2), chain.depth)
        d = np.abs(h[idx][:, None] - h[idx][None, :])
        mask = s < chain.depth
        if mask.any():
            C = max(C, float((d[mask] / beta ** s[mask]).max()))
    return C


def invariant_density(tower: TowerModel, depth: int = 2, iterations: int = 100_000,
                      tol: float = 1e-13, check_hypotheses: bool = True) -> InvariantDensity:
    """Fixed density of the tower transfer operator by power iteration."""
    from .symbolic import check_aperiodicity, check_coprime_block

    base = tower.base
    if base is None:
        raise UnsupportedOperation("invariant density needs a symbolic base")
    if check_hypotheses:
        if not check_aperiodicity(base, max(64, base.alphabet_size)).ok:
            raise HypothesisFailure("base is not aperiodic")
        if not check_coprime_block(base).ok:
            raise HypothesisFailure("base has no coprime block")
    ch = tower.cell_chain(depth)
    Q = ch.Q
    p = ch.mass / ch.mass.sum()
    res = np.inf
    it = 0
    # square the matrix periodically to accelerate slow chains
    Qk = Q
    for it in range(1, iterations + 1):
        q = p @ Qk
        res = float(np.abs(q - p).sum())
        p = q / q.sum()
        if res < tol:
            break
        if it % 64 == 0 and Qk.shape[0] <= 1500:
            Qk = Qk @ Qk
    else:
        raise ConvergenceError(f"power iteration did not converge (residual {res:.3g})", res)
    h = p / ch.mass
    if np.any(h <= 0):
        raise HypothesisFailure("invariant density vanishes on some cell")
    inv_res = float(np.abs(p @ Q - p).sum())
    C = log_regularity(ch, h, base.beta)
    return InvariantDensity(ch, h, float(h.max()), C, inv_res, it)
