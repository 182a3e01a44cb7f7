"""Coupling of two densities on the product tower.

Everything exact here works on finite models with a depth-1 Jacobian and
input densities that are constant on depth-``D`` cells.  Under those
assumptions the tower is an exact finite Markov chain on cells, the
simultaneous-return time ``S`` is a hitting time of a product chain with a
small phase register, and the density recursion only depends on how many
symbols of each coordinate the induced product map has consumed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (ConvergenceError, HypothesisFailure, ModelError,
                     NumericalFault, TruncationError)
from .symbolic import check_aperiodicity, check_coprime_block
from .tower import TowerModel, TowerPoint, hat_R_tail_array


# -- n0 and gamma0 -----------------------------------------------------------


def choose_n0(tower: TowerModel, horizon: int = 64):
    """Smallest ``n0 >= 1`` with ``m(T^-n Delta_0 ∩ F(omega)) > 0`` for all
    symbols ``omega`` and ``n0 <= n <= horizon``; ``gamma0`` is the infimum
    of those masses."""
    base = tower.base
    if not base.markov_jacobian:
        raise ModelError("choose_n0 needs a depth-1 Jacobian")
    if not check_aperiodicity(base, max(horizon, base.alphabet_size)).ok:
        raise HypothesisFailure("base is not aperiodic")
    if not check_coprime_block(base).ok:
        raise HypothesisFailure("base has no coprime block")
    ch = tower.cell_chain(1)
    lev0 = ch.level == 0
    n_sym = base.alphabet_size
    mu = np.zeros((n_sym, ch.n_cells))
    for i, img in enumerate(base.images):
        for j in img:
            mu[i, ch.cell_of(0, (j,))] = base.element_mass[j]
    hits = np.empty((horizon + 1, n_sym))
    for n in range(horizon + 1):
        hits[n] = mu[:, lev0].sum(axis=1)
        mu = mu @ ch.Q
    positive = (hits > 1e-300).all(axis=1)
    if not positive[-1]:
        raise HypothesisFailure(f"no n0 <= {horizon}: returns to the base are periodic")
    n0 = horizon
    while n0 > 1 and positive[n0 - 1]:
        n0 -= 1
    return n0, float(hits[n0:].min())


# -- product model ------------------------------------------------------------


@dataclass
class ProductModel:
    """Two copies of a finite tower with initial densities on depth-``D`` cells.

    ``phi1``/``phi2`` are probability densities w.r.t. the tower measure ``m``,
    given by their values on the cells of ``chain``.
    """

    tower: TowerModel
    chain: object
    phi1: np.ndarray
    phi2: np.ndarray
    n0: int
    gamma0: float

    @property
    def depth(self):
        return self.chain.depth

    @property
    def lambda1(self):
        return self.phi1 * self.chain.mass

    @property
    def lambda2(self):
        return self.phi2 * self.chain.mass


def product_model(tower: TowerModel, phi1, phi2, depth: int, horizon: int = 64) -> ProductModel:
    chain = tower.cell_chain(depth)
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    for k, p in enumerate((phi1, phi2), 1):
        if p.shape != (chain.n_cells,):
            raise ModelError(f"phi{k} must have one value per depth-{depth} cell")
        if np.any(~(p > 0)):
            raise ModelError(f"phi{k} must be positive")
        tot = float(np.dot(p, chain.mass))
        if abs(tot - 1) > 1e-9:
            raise ModelError(f"phi{k} integrates to {tot}, not 1")
    n0, g0 = choose_n0(tower, horizon)
    return ProductModel(tower, chain, phi1, phi2, n0, g0)


# -- pathwise stopping times ---------------------------------------------------


def _level0_times(tower, point: TowerPoint, horizon: int):
    """Times ``t <= horizon`` at which the orbit of ``point`` sits on level 0."""
    R = tower.base.return_time
    w = point.base
    out = [0] if point.level == 0 else []
    t = int(R[w[0]]) - point.level
    k = 1
    while t <= horizon:
        out.append(t)
        if k >= len(w):
            return np.array(out), t  # itinerary exhausted at time t
        t += int(R[w[k]])
        k += 1
    return np.array(out), None


def stopping_times(prod, u, k_max: int, start: int = 0):
    """``tau_0 = start < tau_1 < ... < tau_{k_max}`` for a product point ``u``.

    ``tau_k = n0 + tau_{k-1} + R_hat(T^(n0 + tau_{k-1}) pi_c)`` with ``c``
    alternating between the coordinates, the first one first.
    """
    x, y = u
    n0 = prod.n0
    horizon = start + k_max * (n0 + int(prod.tower.base.return_time.max()) + 1)
    Z = []
    limit = np.inf
    for p in (x, y):
        z, ex = _level0_times(prod.tower, p, horizon)
        Z.append(z)
        if ex is not None:
            limit = min(limit, ex)
    taus = [start]
    for k in range(1, k_max + 1):
        c = (k - 1) % 2
        t0 = taus[-1] + n0
        z = Z[c]
        j = np.searchsorted(z, t0)
        if j >= z.size or z[j] > limit:
            raise TruncationError(f"itinerary too short to resolve tau_{k}")
        taus.append(int(z[j]))
    return np.array(taus), Z


def simultaneous_return(prod, u, i_cap: int = 64):
    """``S(u) = min{tau_i : i >= 2, both coordinates on level 0}``; ``None`` when
    not found by ``tau_{i_cap}`` (censored)."""
    taus, Z = stopping_times(prod, u, i_cap)
    for i in range(2, i_cap + 1):
        t = taus[i]
        if t in Z[0] and t in Z[1]:
            return int(t)
    return None


# -- vectorised Monte Carlo ------------------------------------------------------


def _sample_cells(chain, density, n, rng):
    p = density * chain.mass
    p = p / p.sum()
    return rng.choice(chain.n_cells, size=n, p=p)


def _sample_itineraries(chain, cells, length, rng):
    """Level and itinerary (``length`` symbols) for each sampled cell."""
    base = chain.tower.base
    D = chain.depth
    n = cells.size
    W = np.empty((n, max(length, D)), dtype=np.int64)
    W[:, :D] = chain.words[chain.word_index[cells]]
    P = base.markov_matrix
    n_sym = P.shape[0]
    # row s of the cumulative table is shifted by s, so one sorted search
    # serves every row
    flat = (np.cumsum(P, axis=1) + np.arange(n_sym)[:, None]).ravel()
    for k in range(D, W.shape[1]):
        u = rng.uniform(size=n)
        prev = W[:, k - 1]
        W[:, k] = np.searchsorted(flat, prev + u) - prev * n_sym
    np.minimum(W, base.alphabet_size - 1, out=W)
    return chain.level[cells], W


def _return_schedule(R, level, W):
    """Level-0 time table per orbit, padded with a large sentinel."""
    RW = R[W]
    first = RW[:, :1] - level[:, None]
    t = np.concatenate([first, first + np.cumsum(RW[:, 1:], axis=1)], axis=1)
    Z = np.concatenate([np.where(level == 0, 0, -1)[:, None], t], axis=1)
    return Z, t[:, -1]


def _next_zero(Z, t):
    """Row-wise smallest entry of ``Z`` that is ``>= t``."""
    n, L = Z.shape
    big = np.int64(Z.max() + 2 + t.max())
    off = np.arange(n, dtype=np.int64) * big
    flat = (np.where(Z < 0, 0, Z) + off[:, None]).ravel()
    # entries marked -1 (no level-0 at time 0) sort first within the row
    flat = np.where(Z.ravel() < 0, off.repeat(L) - 1, flat)
    idx = np.searchsorted(flat, t + off)
    idx = np.minimum(idx, n * L - 1)
    val = flat[idx] - off
    row_ok = idx // L == np.arange(n)
    return np.where(row_ok, val, np.iinfo(np.int64).max // 4)


def _count_le(Z, t):
    """Row-wise number of level-0 returns (excluding time 0) at times ``<= t``."""
    return (Z[:, 1:] <= t[:, None]).sum(axis=1)


@dataclass
class CouplingSample:
    """Monte Carlo sample of the stopping-time structure."""

    S: np.ndarray  # first simultaneous return, -1 when censored
    S_blocks: np.ndarray  # (n, blocks) successive S_k - S_{k-1}, -1 censored
    eps0_groups: dict = field(repr=False, default_factory=dict)
    gap_groups: dict = field(repr=False, default_factory=dict)
    censored: float = 0.0


def simulate_coupling(prod: ProductModel, samples: int, seed=0, blocks: int = 1,
                      i_cap: int = 64, itinerary: int | None = None, k_groups: int = 6,
                      densities=None) -> CouplingSample:
    """Sample ``S`` (and ``S_k`` increments) from ``P = lambda1 x lambda2``.

    ``eps0_groups[(k, g, stat)]`` collects ``[trials, successes]`` of the event
    ``S = tau_k`` among orbits with ``S > tau_{k-1}``; the key is a sufficient
    statistic of the ``xi_k`` cell for that event (see the notes in
    :func:`conditional_lemmas`).  ``gap_groups`` collects the increments
    ``tau_{k+1} - tau_k`` under the same keys.
    """
    rng = np.random.default_rng(seed)
    ch = prod.chain
    R = prod.tower.base.return_time
    n0 = prod.n0
    D = ch.depth
    if itinerary is None:
        itinerary = max(64, int(blocks * i_cap * (n0 + 1) / max(1.0, R.mean())) + D)
    d1, d2 = densities if densities is not None else (prod.phi1, prod.phi2)
    c1 = _sample_cells(ch, d1, samples, rng)
    c2 = _sample_cells(ch, d2, samples, rng)
    lv1, W1 = _sample_itineraries(ch, c1, itinerary, rng)
    lv2, W2 = _sample_itineraries(ch, c2, itinerary, rng)
    Z1, end1 = _return_schedule(R, lv1, W1)
    Z2, end2 = _return_schedule(R, lv2, W2)
    horizon = np.minimum(end1, end2)
    Zs = (Z1, Z2)
    Ws = (W1, W2)
    lvs = (lv1, lv2)
    n = samples
    S_blocks = np.full((n, blocks), -1, dtype=np.int64)
    n_sym = prod.tower.base.alphabet_size
    eps_rec, gap_rec = [], []
    block_start = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for b in range(blocks):
        tau_prev = block_start.copy()
        tau_prev2 = np.full(n, -1, dtype=np.int64)
        done = ~alive
        S_here = np.full(n, -1, dtype=np.int64)
        for k in range(1, i_cap + 1):
            c = (k - 1) % 2
            o = 1 - c
            tau = _next_zero(Zs[c], tau_prev + n0)
            bad = (tau > horizon) & ~done
            done |= bad
            both = _next_zero(Zs[o], tau) == tau
            hit = both & (k >= 2) & ~done
            if b == 0 and 2 <= k <= k_groups + 1:
                # non-searched coordinate o: info up to its return at tau_{k-1}
                act = ~done
                j = _count_le(Zs[o], tau_prev)
                code = _stat_code(Ws[o], lvs[o], j, D, n_sym)
                g = tau - tau_prev
                eps_rec.append(np.column_stack([np.full(act.sum(), k), g[act], code[act],
                                                hit[act].astype(np.int64)]))
                # gap to the next stopping time, searched on coordinate o
                tau_next = _next_zero(Zs[o], tau + n0)
                ok = act & (tau_next <= horizon)
                gap_rec.append(np.column_stack([np.full(ok.sum(), k), g[ok], code[ok],
                                                (tau_next - tau)[ok]]))
            S_here[hit] = tau[hit]
            done |= hit
            tau_prev2 = tau_prev
            tau_prev = np.where(done, tau_prev, tau)
            if done.all():
                break
        ok = S_here >= 0
        S_blocks[ok, b] = S_here[ok] - block_start[ok]
        alive &= ok
        block_start = np.where(ok, S_here, block_start)
    S = S_blocks[:, 0]
    eps_groups, gap_groups = {}, {}
    if eps_rec:
        E = np.concatenate(eps_rec)
        keys, inv = np.unique(E[:, :3], axis=0, return_inverse=True)
        inv = inv.ravel()
        trials = np.bincount(inv, minlength=len(keys))
        succ = np.bincount(inv, weights=E[:, 3], minlength=len(keys))
        for key, t_, s_ in zip(keys, trials, succ):
            k_, g_, c_ = (int(v) for v in key)
            eps_groups[(k_, g_, _stat_decode(c_, D, n_sym))] = [int(t_), int(s_)]
        G = np.concatenate(gap_rec)
        order = np.lexsort((G[:, 3], G[:, 2], G[:, 1], G[:, 0]))
        G = G[order]
        keys, first = np.unique(G[:, :3], axis=0, return_index=True)
        bounds = list(first[1:]) + [G.shape[0]]
        for key, a_, b_ in zip(keys, first, bounds):
            k_, g_, c_ = (int(v) for v in key)
            gap_groups[(k_, g_, _stat_decode(c_, D, n_sym))] = G[a_:b_, 3].copy()
    return CouplingSample(S, S_blocks, eps_groups, gap_groups, float(np.mean(S < 0)))


def _stat_code(W, level, j, D, n_sym):
    """Integer code of the sufficient statistic: the last known symbol once
    ``j >= D`` symbols are known, else (initial level, known prefix)."""
    B = n_sym + 1
    last = W[np.arange(W.shape[0]), np.maximum(j - 1, 0)]
    word = np.zeros(W.shape[0], dtype=np.int64)
    for i in range(D):
        word += np.where(i < j, (W[:, i] + 1) * B**i, 0)
    unresolved = n_sym + level * B**D + word
    return np.where(j >= D, last, unresolved)


def _stat_decode(code, D, n_sym):
    if code < n_sym:
        return ("m", code)
    B = n_sym + 1
    code -= n_sym
    level, word = divmod(code, B**D)
    w = []
    while word:
        word, r = divmod(word, B)
        w.append(r - 1)
    return ("w", level, tuple(w))


# -- exact product-chain computations --------------------------------------------


_A, _E, _O = 0, 1, 2  # waiting for tau_1; for even k; for odd k >= 3


def s_tail_exact(prod: ProductModel, init: np.ndarray, n_max: int):
    """Exact survival ``mu{S > n}`` for ``n = 0..n_max`` from an initial mass
    array ``init`` over (cell, cell) pairs.

    Returns ``(survival, entry)`` where ``entry`` is the (cell, cell) mass
    absorbed at ``S`` (the law of ``T~(u)``; level-0 cells only).
    """
    Q = prod.chain.Q
    lev0 = (prod.chain.level == 0).astype(float)
    both = np.outer(lev0, lev0)
    n0 = prod.n0
    N = Q.shape[0]
    # state[type][r] : (N, N) masses, r = steps left before the check
    state = np.zeros((3, n0 + 1, N, N))
    state[_A, n0] = init
    surv = np.empty(n_max + 1)
    surv[0] = float(init.sum())
    entry = np.zeros((N, N))
    nxt_type = {_A: _E, _E: _O, _O: _E}
    for t in range(1, n_max + 1):
        new = np.zeros_like(state)
        for ty in range(3):
            for r in range(n0 + 1):
                M = state[ty, r]
                if not M.any():
                    continue
                new[ty, max(r - 1, 0)] += Q.T @ M @ Q
        # checks for states whose waiting time has elapsed
        for ty in range(3):
            M = new[ty, 0]
            if not M.any():
                continue
            mask = lev0[:, None] if ty in (_A, _O) else lev0[None, :]
            ev = M * mask
            new[ty, 0] = M - ev
            if ty == _A:
                new[_E, n0] += ev
            else:
                ab = ev * both
                entry += ab
                new[nxt_type[ty], n0] += ev - ab
        state = new
        surv[t] = float(state.sum())
    return surv, entry


def tv_distance(prod: ProductModel, n_max: int) -> np.ndarray:
    """Exact ``|T^n_* lambda1 - T^n_* lambda2|`` (total variation norm, max 2)."""
    Q = prod.chain.Q
    a, b = prod.lambda1.copy(), prod.lambda2.copy()
    out = np.empty(n_max + 1)
    for n in range(n_max + 1):
        out[n] = float(np.abs(a - b).sum())
        a = a @ Q
        b = b @ Q
    return out


@dataclass
class TailModel:
    """Survival function of a stopping time or return time.

    ``kind`` is ``"polynomial"`` (``C n^-p``), ``"exponential"``
    (``C e^(-c n)``) or ``"empirical"`` (tabulated, 0 beyond the table).
    ``total`` caps the survival (the measure of everything).
    """

    kind: str
    params: dict
    total: float = 1.0
    values: np.ndarray | None = None

    def __call__(self, x):
        x = np.floor(np.asarray(x, dtype=float))
        if self.kind == "empirical":
            v = self.values
            idx = np.clip(x, 0, v.size - 1).astype(int)
            return np.where(x < 0, self.total, np.where(x >= v.size, 0.0, v[idx]))
        with np.errstate(divide="ignore", over="ignore"):
            if self.kind == "polynomial":
                s = self.params["C"] * np.maximum(x, 1.0) ** (-self.params["p"])
            elif self.kind == "exponential":
                s = self.params["C"] * np.exp(-self.params["c"] * x)
            else:
                raise ModelError(f"unknown tail kind {self.kind!r}")
        return np.minimum(s, self.total)

    @property
    def exponent(self):
        return self.params.get("p")

    @property
    def rate(self):
        return self.params.get("c")


def empirical_tail(values, total=None) -> TailModel:
    v = np.asarray(values, dtype=float)
    return TailModel("empirical", {}, float(v[0] if total is None else total), v)


def block_gap_constant(prod: ProductModel, n_max: int = 200, k_max: int = 4,
                       floor: float = 1e-300):
    """Exact ``D2 = max_k max_n P{S_{k+1} - S_k > n} / (m x m){S > n}``.

    The law of the ``k``-th block start is obtained by absorbing the S-chain
    ``k`` times.  Returns ``(D2, ratios, mm_tail)``.
    """
    m = prod.chain.mass
    mm_surv, _ = s_tail_exact(prod, np.outer(m, m), n_max)
    init = np.outer(prod.lambda1, prod.lambda2)
    ratios = []
    for _ in range(k_max + 1):
        surv, entry = s_tail_exact(prod, init, n_max)
        tot = surv[0]
        if tot <= 0:
            break
        rel = surv / tot
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(mm_surv > floor, rel / mm_surv, np.where(rel > floor, np.inf, 0.0))
        ratios.append(r)
        init = entry / entry.sum()
    ratios = np.array(ratios)
    return float(ratios.max()), ratios, mm_surv


# -- epsilon sequence ------------------------------------------------------------


@dataclass
class EpsilonSequence:
    eps_prime: np.ndarray  # index i = 1..i_max stored at position i-1
    delta_bar: float
    beta: float
    D3: float
    v4: np.ndarray
    v5: np.ndarray
    D_bar: float | None = None
    theta: float | None = None
    C_tilde: float | None = None
    v6_residual: float | None = None
    D4: float | None = None

    @property
    def eps(self):
        return self.delta_bar * self.eps_prime

    @property
    def zeta(self):
        return None if self.D4 is None else self.delta_bar / self.D4

    def log_products(self, D):
        """``log prod_{j <= i} (1 - eps_j / D)`` for ``i = 1..i_max``."""
        return np.cumsum(np.log1p(-self.eps / D))

    def products(self, D):
        return np.exp(self.log_products(D))


def _log_profile(v, i_max):
    v = np.asarray(v, dtype=float)
    if np.any(np.diff(v) > 1e-15 * max(v[0], 1e-300)):
        raise ModelError("variation profile must be non-increasing")
    out = np.full(i_max + 1, -np.inf)
    k = min(v.size, i_max + 1)
    with np.errstate(divide="ignore"):
        out[:k] = np.log(v[:k])
    return out


def epsilon_sequence(v, beta: float, delta_bar: float = 1.0, i_max: int = 10_000,
                     D_bar: float | None = 2.0, eps_floor: float = 1e-12,
                     growth_tol: float = 1.05) -> EpsilonSequence:
    """Build and verify the ``eps'`` sequence for a variation profile ``v_i``.

    Target products ``P_i = min(1/v_i, beta^(-i/2))`` made non-decreasing,
    ``eps'_i = min(1/2, P_i/P_{i-1} - 1)`` (floored at ``eps_floor``).  Then
    ``v_i prod(1 + eps') <= 1`` and the second sum is at most
    ``sum_k beta^(k/2)``; both are re-verified numerically, together with the
    boundedness test that the maximum over the second half of the range does
    not exceed ``growth_tol`` times the maximum over the first half.

    With ``D_bar`` given, ``prod (1 - eps_j/D_bar)`` is fitted to
    ``C max(v_i^(delta_bar/D_bar), theta^i)`` in log coordinates.
    """
    if not 0 < beta < 1:
        raise ModelError("beta must lie in (0, 1)")
    if delta_bar <= 0:
        raise ModelError("delta_bar must be positive")
    lv = _log_profile(v, i_max)
    i = np.arange(i_max + 1, dtype=float)
    logP = np.minimum(-lv, -0.5 * i * math.log(beta))
    logP[0] = 0.0
    logP = np.maximum.accumulate(logP)
    ratio = np.expm1(np.diff(logP))
    eps_p = np.clip(ratio, eps_floor, 0.5)
    log1p = np.log1p(eps_p)
    # weighted profile: v_i prod_{j<=i} (1 + eps'_j)
    with np.errstate(invalid="ignore"):
        v4 = np.exp(lv[1:] + np.cumsum(log1p))
    v4 = np.nan_to_num(v4, nan=0.0)
    # geometric sum: S_i = (1 + eps'_i) beta (S_{i-1} + 1)
    v5 = np.empty(i_max)
    s = 0.0
    for k in range(i_max):
        s = (1 + eps_p[k]) * beta * (s + 1.0)
        v5[k] = s
    for name, arr in (("weighted profile", v4), ("geometric sum", v5)):
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0]) + 1
            raise ConvergenceError(f"{name} not finite at i = {bad}", bad)
        h = arr.size // 2
        if h and arr[h:].max() > growth_tol * max(arr[:h].max(), 1e-300):
            bad = int(h + np.argmax(arr[h:] > growth_tol * arr[:h].max())) + 1
            raise ConvergenceError(f"{name} grows without bound (first offending i = {bad})", bad)
    D3 = float(max(v4.max(initial=0.0), v5.max(initial=0.0), math.exp(lv[0]) if np.isfinite(lv[0]) else 0))
    seq = EpsilonSequence(eps_p, float(delta_bar), float(beta), D3, v4, v5)
    if D_bar is not None:
        fit_v6(seq, v, D_bar)
    return seq


def fit_v6(seq: EpsilonSequence, v, D_bar: float):
    """Fit ``log prod(1 - eps_j/D_bar) = c + max(kappa log v_i, i log theta)``
    with ``kappa = delta_bar/D_bar``; stores theta, C~ and the relative RMS
    residual in log coordinates."""
    if D_bar <= 1:
        raise ModelError("D_bar must exceed 1")
    n = seq.eps_prime.size
    y = seq.log_products(D_bar)
    lv = _log_profile(v, n)[1:]
    i = np.arange(1, n + 1, dtype=float)
    kappa = seq.delta_bar / D_bar
    a = kappa * lv

    def resid(lt):
        model = np.maximum(a, i * lt)
        c = float(np.mean(y - model))
        return float(np.sqrt(np.mean((y - model - c) ** 2))), c

    # theta cannot be larger than the realised geometric rate
    grid = np.linspace(-2.0, -1e-6, 2001) * (kappa * abs(math.log(seq.beta)))
    vals = [resid(lt)[0] for lt in grid]
    lt = float(grid[int(np.argmin(vals))])
    r, c = resid(lt)
    scale = float(np.sqrt(np.mean(y**2))) or 1.0
    seq.D_bar = float(D_bar)
    seq.theta = math.exp(lt)
    seq.C_tilde = math.exp(c)
    seq.v6_residual = r / scale
    return seq


# -- density recursion -------------------------------------------------------------


@dataclass
class CouplingRun:
    mass_remaining: np.ndarray  # int Phi~_i d(m x m), i = 0..i_max
    leaked: np.ndarray  # leaked mass at step i (index i-1)
    D4: float
    max_ratio: np.ndarray  # per step, sup of Phi~_i / Phi~_{i-1}
    eps: np.ndarray
    censored: float
    nodes: int
    monotone: bool

    @property
    def total_leaked(self):
        return float(self.leaked.sum())


def _prefix_extremes(chain, phi):
    """min, max and integral (against m) of ``phi`` over each (level, prefix)."""
    W = chain.words[chain.word_index]
    out = {}
    for c in range(chain.n_cells):
        lev = int(chain.level[c])
        for L in range(1, chain.depth + 1):
            key = (lev, tuple(W[c, :L].tolist()))
            val = phi[c]
            mass = chain.mass[c]
            rec = out.get(key)
            if rec is None:
                out[key] = [val, val, val * mass, mass]
            else:
                rec[0] = min(rec[0], val)
                rec[1] = max(rec[1], val)
                rec[2] += val * mass
                rec[3] += mass
    return out


def density_recursion(prod: ProductModel, eps, i_max: int = 50, block_cap: int = 400,
                      tol: float = 1e-15, prune: float = 1e-30) -> CouplingRun:
    """Run the splitting recursion on the cells of the induced product map.

    ``Omega_i(u)`` is the set of points sharing the symbols both coordinates
    consumed before ``S_i``; the Jacobian of ``T~^i`` is constant there (depth-1
    Jacobian), so the subtracted term is ``eps_i min_Omega Phi~_{i-1}``.  Nodes
    are enumerated until both consumed prefixes reach the cell depth, after
    which ``Phi~`` is constant on the node and evolves by ``(1 - eps_i)``.
    Branches whose (m x m)-mass drops below ``prune`` before ``S`` is reached
    are dropped and reported in ``censored``.
    """
    eps = np.asarray(getattr(eps, "eps", eps), dtype=float)
    if eps.size < i_max:
        raise ModelError(f"need {i_max} epsilons, have {eps.size}")
    if np.any(eps < 0) or np.any(eps > 1):
        raise ModelError("eps_i must lie in [0, 1]")
    ch = prod.chain
    base = prod.tower.base
    R = base.return_time
    P = base.markov_matrix
    D = ch.depth
    n0 = prod.n0
    ext1 = _prefix_extremes(ch, prod.phi1)
    ext2 = _prefix_extremes(ch, prod.phi2)
    lev0 = ch.level == 0

    def stats(lev, word, ext):
        return ext[(lev, word[:D])]

    # node key: (lev1, word1, lev2, word2, c) ; dynamic state (level, sym or -1-pending_from)
    # start: eta x eta elements, prefix = first symbol
    nodes = {}
    for lev in range(prod.tower.levels):
        for s in range(base.alphabet_size):
            if R[s] <= lev:
                continue
            for lev2 in range(prod.tower.levels):
                for s2 in range(base.alphabet_size):
                    if R[s2] <= lev2:
                        continue
                    mass = base.element_mass[s] * base.element_mass[s2]
                    key = ((lev, (s,)), (lev2, (s2,)), 0.0, (lev, s), (lev2, s2))
                    nodes[key] = nodes.get(key, 0.0) + mass
    mass_rem = [float(np.dot(prod.phi1, ch.mass) * np.dot(prod.phi2, ch.mass))]
    leaked = []
    max_ratio = []
    D4 = 1.0
    resolved_A = 0.0  # sum over resolved nodes of mass * Phi~
    censored = 0.0
    n_nodes = 0
    monotone = True

    for i in range(1, i_max + 1):
        e = eps[i - 1]
        # leak and update on resolved pool
        leak = e * resolved_A
        new_resolved = resolved_A - leak
        new_nodes = {}
        if nodes:
            # evolve each unresolved node through one block of the S process
            frontier = {}
            for (info1, info2, c, d1, d2), mass in nodes.items():
                k = (info1, info2, c, d1, d2, _A, n0)
                frontier[k] = frontier.get(k, 0.0) + mass
            for _step in range(block_cap):
                if not frontier:
                    break
                nxt = {}
                for (info1, info2, c, d1, d2, ty, r), mass in frontier.items():
                    # resolve pending symbols and step both coordinates
                    opts1 = _step_options(d1, info1, R, P, base, D)
                    opts2 = _step_options(d2, info2, R, P, base, D)
                    for (nd1, ni1, p1) in opts1:
                        for (nd2, ni2, p2) in opts2:
                            mm = mass * p1 * p2
                            if mm <= 0:
                                continue
                            r2 = max(r - 1, 0)
                            ty2 = ty
                            absorbed = False
                            if r2 == 0:
                                c_on = (nd1[0] == 0) if ty in (_A, _O) else (nd2[0] == 0)
                                if c_on:
                                    both = nd1[0] == 0 and nd2[0] == 0
                                    if ty != _A and both:
                                        absorbed = True
                                    else:
                                        ty2 = _E if ty in (_A, _O) else _O
                                        r2 = n0
                            if absorbed:
                                # pending new symbols at S: prefixes exclude them
                                key = (ni1, ni2, c, nd1, nd2)
                                new_nodes[key] = new_nodes.get(key, 0.0) + mm
                            else:
                                key = (ni1, ni2, c, nd1, nd2, ty2, r2)
                                nxt[key] = nxt.get(key, 0.0) + mm
                # negligible unabsorbed mass is booked as censored
                small = [k for k, v in nxt.items() if v < prune]
                for k in small:
                    censored += nxt.pop(k)
                frontier = nxt
            censored += sum(frontier.values())
        # apply the recursion on the block-i cells
        leak_nodes = 0.0
        worst = 1.0 - e if resolved_A > 0 else 0.0
        survivors = {}
        for (info1, info2, c, d1, d2), mass in new_nodes.items():
            n_nodes += 1
            s1 = stats(*info1, ext1)
            s2 = stats(*info2, ext2)
            mn = s1[0] * s2[0] - c
            mx = s1[1] * s2[1] - c
            avg = (s1[2] / s1[3]) * (s2[2] / s2[3]) - c
            if mn < -tol:
                raise NumericalFault(f"negative density {mn:.3g} at step {i}")
            if mn > 0:
                D4 = max(D4, mx / mn)
                worst = max(worst, 1.0 - e * mn / mx)
            else:
                worst = 1.0
            sub = e * max(mn, 0.0)
            leak_nodes += sub * mass
            c2 = c + sub
            rem = avg - sub
            if len(info1[1]) >= D and len(info2[1]) >= D:
                new_resolved += rem * mass
            else:
                key = (info1, info2, c2, d1, d2)
                survivors[key] = survivors.get(key, 0.0) + mass
        nodes = survivors
        resolved_A = new_resolved
        leaked.append(leak + leak_nodes)
        mass_rem.append(resolved_A + sum(
            ((stats(*k[0], ext1)[2] / stats(*k[0], ext1)[3]) *
             (stats(*k[1], ext2)[2] / stats(*k[1], ext2)[3]) - k[2]) * m
            for k, m in nodes.items()))
        max_ratio.append(worst)
        if mass_rem[-1] > mass_rem[-2] + 1e-12:
            monotone = False
    return CouplingRun(np.array(mass_rem), np.array(leaked), float(D4), np.array(max_ratio),
                       eps[:i_max].copy(), float(censored), n_nodes, monotone)


def _step_options(d, info, R, P, base, D):
    """One tower step from dynamic state ``d = (level, symbol)``.

    A negative symbol ``-1 - s`` marks level 0 with the next symbol still
    undrawn after leaving ``s``; it is drawn here and appended to the prefix.
    Returns ``[(new_dyn, new_info, prob)]``.
    """
    lev, s = d
    out = []
    if s < 0:
        prev = -1 - s
        for t in base.images[prev]:
            p = P[prev, t]
            lev_i, word = info
            ni = (lev_i, word + (t,)) if len(word) < D else info
            out.extend((nd, ni2, p * q) for nd, ni2, q in _step_options((0, t), ni, R, P, base, D))
        return out
    if lev + 1 < R[s]:
        return [((lev + 1, s), info, 1.0)]
    # return to level 0: the new symbol is drawn lazily at the next step
    return [((0, -1 - s), info, 1.0)]


# -- bounds and envelopes -----------------------------------------------------------


def d5_constant(D2: float, D4: float, delta_bar: float) -> float:
    return 2.0 * D2 * (1.0 + delta_bar * D4 / (2.0 * D4 - delta_bar))


def matching_bound(n, S_tail: Callable, eps, D5: float, D4: float,
                   mm_tail: Callable | None = None) -> np.ndarray:
    """``2 P{S>n} + D5 sum_{i=1}^n prod_{j<=i}(1 - eps_j/D4) (i+1) (m x m){S > n/(i+1)}``."""
    eps = np.asarray(getattr(eps, "eps", eps), dtype=float)
    mm_tail = S_tail if mm_tail is None else mm_tail
    n_arr = np.atleast_1d(np.asarray(n, dtype=np.int64))
    nmax = int(n_arr.max())
    if eps.size < nmax:
        raise ModelError(f"need {nmax} epsilons, have {eps.size}")
    prods = np.exp(np.cumsum(np.log1p(-eps[:nmax] / D4))) if nmax else np.zeros(0)
    out = np.empty(n_arr.size)
    for k, nn in enumerate(n_arr):
        s = 2.0 * float(S_tail(nn))
        if nn >= 1:
            i = np.arange(1, nn + 1)
            s += D5 * float(np.sum(prods[:nn] * (i + 1) * mm_tail(nn / (i + 1))))
        out[k] = s
    return out if np.ndim(n) else out[0]


@dataclass
class Envelope:
    label: str
    func: Callable
    slope: float | None  # log-log slope when the shape is a power law
    log_power: int = 0

    def __call__(self, n):
        return self.func(np.asarray(n, dtype=float))


def rate_envelope(tail, cls: str, tau: float, zeta: float, tau_prime: float | None = None,
                  c_prime: float = 1.0) -> Envelope:
    """Predicted asymptotic shape of ``|T^n lambda - nu|`` and of the correlations.

    ``tail`` is a :class:`TailModel` or ``("polynomial", a)`` /
    ``("exponential", c)``.
    """
    if isinstance(tail, TailModel):
        kind = tail.kind
        a = (tail.exponent or 0.0) if kind == "polynomial" else None
    else:
        kind, a = tail[0], tail[1]
    if not 0 < zeta <= 1:
        raise ModelError("zeta must lie in (0, 1]")
    if kind == "polynomial":
        if a is None or a <= 1:
            raise ModelError("polynomial tail needs a > 1")
        if cls not in ("V4", "R4"):
            raise ModelError("polynomial-tail envelopes are stated for class 4")
        if not tau > 2 / zeta:
            raise ModelError(f"inadmissible: tau = {tau} <= 2/zeta = {2 / zeta:.4g}")
        zt = zeta * tau
        if math.isclose(zt, a + 1, rel_tol=1e-9):
            return Envelope("n^(1-a) log n", lambda n: n ** (1 - a) * np.log(n), 1 - a, 1)
        p = max(1 - a, 2 - zt)
        return Envelope(f"max(n^(1-a), n^(2-zeta tau)) = n^{p:.4g}",
                        lambda n: np.maximum(n ** (1 - a), n ** (2 - zt)), p)
    if kind != "exponential":
        raise ModelError(f"unknown tail kind {kind!r}")
    k = cls[1]
    tp = tau * (1 - 1e-3) if tau_prime is None else tau_prime
    if k == "1":
        return Envelope("exp(-c' n)", lambda n: np.exp(-c_prime * n), None)
    if k == "2":
        if not tp < tau:
            raise ModelError("tau' must be smaller than tau")
        return Envelope(f"exp(-n^{tp:.4g})", lambda n: np.exp(-(n**tp)), None)
    if k == "3":
        if not tp < tau:
            raise ModelError("tau' must be smaller than tau")
        return Envelope(f"exp(-(log n)^{tp:.4g})", lambda n: np.exp(-np.log(n) ** tp), None)
    if not tau > 1 / zeta:
        raise ModelError(f"inadmissible: tau = {tau} <= 1/zeta = {1 / zeta:.4g}")
    return Envelope(f"n^(1-zeta tau) = n^{1 - zeta * tau:.4g}",
                    lambda n: n ** (1 - zeta * tau), 1 - zeta * tau)


def ld_envelope(tail, cls: str, tau: float, zeta: float, tau_prime=None, c_prime=1.0):
    """Predicted large-deviation shape for base-space classes."""
    kind = tail.kind if isinstance(tail, TailModel) else tail[0]
    a = (tail.exponent if isinstance(tail, TailModel) else tail[1])
    if kind == "polynomial":
        if cls != "R4":
            raise ModelError("polynomial-tail large deviations are stated for R4")
        p = max(1 - a, 2 - zeta * tau)
        return Envelope(f"max(n^(1-a), n^(2-zeta tau)) = n^{p:.4g}",
                        lambda n: np.maximum(n ** (1 - a), n ** (2 - zeta * tau)), p)
    if cls == "R1":
        return Envelope("exp(-c' n^(1/3))", lambda n: np.exp(-c_prime * np.cbrt(n)), None)
    if cls == "R2":
        tp = tau * (1 - 1e-3) if tau_prime is None else tau_prime
        e = tp / (tp + 2)
        return Envelope(f"exp(-c' n^{e:.4g})", lambda n: np.exp(-c_prime * n**e), None)
    if cls == "R4":
        return Envelope(f"n^{1 - zeta * tau:.4g}", lambda n: n ** (1 - zeta * tau),
                        1 - zeta * tau)
    raise ModelError(f"no large-deviation shape recorded for {cls}")


def envelope_selection(n, values, envelopes: dict):
    """Which fixed-shape envelope matches ``values`` best up to a constant.

    Scores are the standard deviation of ``log(values / envelope)``; returns
    ``(best_label, scores, band_ratios)``.
    """
    n = np.asarray(n, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    scores, bands = {}, {}
    for label, env in envelopes.items():
        d = y - np.log(env(n))
        scores[label] = float(np.std(d))
        bands[label] = float(math.exp(d.max() - d.min()))
    best = min(scores, key=scores.get)
    return best, scores, bands


# -- Monte Carlo S-tail ---------------------------------------------------------------


def wilson_interval(k, n, z=1.96):
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    p = np.where(n > 0, k / np.maximum(n, 1), 0.0)
    den = 1 + z**2 / n
    centre = (p + z**2 / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / den
    return np.clip(centre - half, 0, 1), np.clip(centre + half, 0, 1)


@dataclass
class STailEstimate:
    n: np.ndarray
    survival: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    censored: float
    fit: TailModel | None


def estimate_S_tail(prod: ProductModel, samples: int, n_grid, seed=0, kind: str | None = None,
                    **sim_kw) -> STailEstimate:
    """Monte Carlo survival of ``S`` with Wilson bands and a tail fit.

    Censored samples (no simultaneous return by the cap) count as survivors at
    every ``n`` below their censoring time, which for a fixed cap is every
    grid point; more than 1% censoring widens the bands to cover the
    censored mass and warns.
    """
    sim = simulate_coupling(prod, samples, seed=seed, **sim_kw)
    S = sim.S
    n_grid = np.asarray(n_grid, dtype=np.int64)
    cens = S < 0
    k = np.array([(np.where(cens, True, S > nn)).sum() for nn in n_grid])
    surv = k / samples
    lo, hi = wilson_interval(k, samples)
    if sim.censored > 0.01:
        warnings.warn(f"{100 * sim.censored:.1f}% of S samples censored", stacklevel=2)
        lo = np.clip(lo - sim.censored, 0, 1)
    fit = None
    pos = surv > 0
    if pos.sum() >= 3:
        x, y = n_grid[pos].astype(float), np.log(surv[pos])
        if kind is None:
            kind = "exponential" if prod.tower.base.return_time.max() < 64 else "polynomial"
        if kind == "polynomial":
            sl, ic = np.polyfit(np.log(np.maximum(x, 1)), y, 1)
            fit = TailModel("polynomial", {"C": math.exp(ic), "p": -sl})
        else:
            sl, ic = np.polyfit(x, y, 1)
            fit = TailModel("exponential", {"C": math.exp(ic), "c": -sl})
    return STailEstimate(n_grid, surv, lo, hi, sim.censored, fit)


# -- conditional lemmas (empirical) -------------------------------------------------------


@dataclass
class ConditionalReport:
    eps0_min: float
    eps0_by_k: dict
    groups_tested: int
    D1: float
    exact: dict


def conditional_lemmas(prod: ProductModel, samples: int = 200_000, seed=0,
                       min_samples: int = 10_000, k_max: int = 6,
                       chunk: int = 200_000) -> ConditionalReport:
    """Empirical ``P(S = tau_k | xi_k cell)`` and gap-tail domination.

    A ``xi_k`` cell fixes the searched coordinate's itinerary up to ``tau_k``
    and the other one's up to its own return at ``tau_{k-1}``.  Under the
    product measure the event ``S = tau_k`` only depends on the second
    coordinate, and its conditional law after ``tau_{k-1}`` is determined by
    ``g = tau_k - tau_{k-1}`` and either its last symbol (when at least ``D``
    symbols are known, so the density no longer depends on the rest) or its
    initial level and known prefix.  Cells are grouped by that key; each group
    with ``min_samples`` trials is tested.
    """
    groups: dict = {}
    gap_hist: dict = {}
    seqs = np.random.SeedSequence(seed).spawn(math.ceil(samples / chunk))
    for c, sq in enumerate(seqs):
        size = min(chunk, samples - c * chunk)
        sim = simulate_coupling(prod, size, seed=np.random.default_rng(sq), k_groups=k_max,
                                i_cap=k_max + 2)
        for key, (t_, s_) in sim.eps0_groups.items():
            rec = groups.setdefault(key, [0, 0])
            rec[0] += t_
            rec[1] += s_
        for key, gaps in sim.gap_groups.items():
            h = np.bincount(gaps)
            old = gap_hist.get(key)
            if old is not None:
                m = max(old.size, h.size)
                h = np.pad(h, (0, m - h.size)) + np.pad(old, (0, m - old.size))
            gap_hist[key] = h
    by_k: dict = {}
    tested = 0
    exact = {}
    for (k, g, stat), (trials, succ) in groups.items():
        if trials < min_samples or k > k_max:
            continue
        tested += 1
        p = succ / trials
        by_k[k] = min(by_k.get(k, 1.0), p)
        if stat[0] == "m":
            exact[(k, g, stat)] = (p, _exact_return_prob(prod, stat[1], g))
    hat = hat_R_tail_array(prod.tower)
    D1 = 0.0
    n0 = prod.n0
    for key, h in gap_hist.items():
        tot = h.sum()
        if tot < min_samples:
            continue
        # survival P(gap > t) for t = 0..len-1
        surv = 1.0 - np.cumsum(h) / tot
        for nn in range(0, max(h.size - 1 - n0, 0) + 1):
            p = float(surv[nn + n0])
            if p <= 0:
                break
            ref = hat[nn] if nn < hat.size else 0.0
            D1 = max(D1, p / ref if ref > 0 else math.inf)
    eps0 = min(by_k.values()) if by_k else float("nan")
    return ConditionalReport(float(eps0), by_k, tested, float(D1), exact)


def _exact_return_prob(prod, last_symbol, g):
    """``P(level 0 after g steps)`` starting at level 0 with the symbol drawn
    from the reference transition law after ``last_symbol``."""
    tower = prod.tower
    ch = tower.cell_chain(1)
    base = tower.base
    mu = np.zeros(ch.n_cells)
    for t in base.images[last_symbol]:
        mu[ch.cell_of(0, (t,))] += base.markov_matrix[last_symbol, t]
    mu = ch.push(mu, g)
    return float(mu[ch.level == 0].sum())


# -- composite report ------------------------------------------------------------------


@dataclass
class CouplingReport:
    n0: int
    gamma0: float
    eps0_min: float
    D1: float
    D2: float
    D3: float
    D4: float
    D5: float
    delta_bar: float
    zeta: float
    S_tail_fit: dict
    bound_curve: np.ndarray
    tv_curve: np.ndarray
    monotone: bool

    @property
    def bound_holds(self) -> bool:
        return bool(np.all(self.tv_curve <= self.bound_curve * (1 + 1e-12)))

    def to_dict(self) -> dict:
        return {
            "n0": self.n0, "gamma0": self.gamma0, "eps0_min": self.eps0_min,
            "D1": self.D1, "D2": self.D2, "D3": self.D3, "D4": self.D4, "D5": self.D5,
            "delta_bar": self.delta_bar, "zeta": self.zeta, "S_tail_fit": self.S_tail_fit,
            "bound_curve": [float(b) for b in self.bound_curve],
            "tv_curve": [float(t) for t in self.tv_curve],
            "monotone": self.monotone, "bound_holds": self.bound_holds,
        }


def _recursion_with_delta(prod, v, beta, delta_bar, i_max, v_imax):
    """Run the recursion for a fixed or automatically chosen ``delta_bar``."""
    candidates = [float(delta_bar)] if delta_bar != "auto" else [2.0**-k for k in range(11)]
    last = None
    for db in candidates:
        seq = epsilon_sequence(v, beta, db, i_max=v_imax, D_bar=2.0)
        try:
            return db, seq, density_recursion(prod, seq, i_max=i_max)
        except NumericalFault as exc:
            last = exc
    raise NumericalFault(f"density recursion faults for every delta_bar tried: {last}")


def coupling_report(tower: TowerModel, phi_star, depth: int = 3, delta_bar="auto",
                    samples: int = 200_000, seed=0, n_max: int = 200, i_max: int = 50,
                    v_imax: int = 2000, min_samples: int = 10_000) -> CouplingReport:
    """Couple ``lambda1 = phi_star * nu`` against ``lambda2 = nu`` on a finite tower.

    Parameters
    ----------
    phi_star : Observable
        Positive, cylinder-measurable observable with ``int phi_star dnu = 1``.
    delta_bar : float or "auto"
        ``"auto"`` picks the largest ``2^-k`` for which the recursion does not
        fault.
    samples : int
        Monte Carlo orbits for the conditional lemma checks (0 skips them).
    """
    from .observables import variation_v
    from .tower import invariant_density

    nu = invariant_density(tower, depth=depth)
    ch = nu.chain
    prod = product_model(tower, phi_star.cell_values(ch) * nu.values, nu.values, depth)
    v = np.maximum(variation_v(phi_star, tower, v_imax, depth=depth).v, 0.0)
    beta = tower.base.beta
    db, _, run = _recursion_with_delta(prod, v, beta, delta_bar, i_max, v_imax)
    D4 = float(run.D4)
    seq = epsilon_sequence(v, beta, db, i_max=v_imax, D_bar=max(D4, 1.0 + 1e-9))
    D2, _, mm = block_gap_constant(prod, n_max)
    surv, _ = s_tail_exact(prod, np.outer(prod.lambda1, prod.lambda2), n_max)
    D5 = d5_constant(D2, D4, db)
    n = np.arange(n_max + 1)
    bound = matching_bound(n, empirical_tail(surv), seq, D5, D4, empirical_tail(mm))
    tv = tv_distance(prod, n_max)
    pos = surv > 1e-300
    sl, ic = np.polyfit(n[pos][1:].astype(float), np.log(surv[pos][1:]), 1)
    tail_fit = {"kind": "exponential", "C": float(math.exp(ic)), "c": float(-sl)}
    if samples > 0:
        cond = conditional_lemmas(prod, samples=samples, seed=seed, min_samples=min_samples)
        eps0, D1 = cond.eps0_min, cond.D1
    else:
        eps0, D1 = float("nan"), float("nan")
    return CouplingReport(prod.n0, float(prod.gamma0), float(eps0), float(D1), float(D2),
                          float(seq.D3), D4, float(D5), db, db / D4, tail_fit, bound, tv,
                          bool(run.monotone))
