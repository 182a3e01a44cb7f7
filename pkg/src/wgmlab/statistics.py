"""Correlation estimates, decay-law fits, CLT and large-deviation experiments.

Finite (oracle) models are simulated exactly: the depth-``D`` cell process
started from the invariant measure is a Markov chain with the cell transfer
matrix as kernel.  Interval models are run through the orbit kernels from a
uniform start after a burn-in.  Every Monte Carlo routine splits its ensemble
into chunks with their own seeded streams, so results depend only on the
arguments and the seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import kernels
from .errors import ModelError, NoSignal, UnsupportedOperation
from .tower import TowerModel, invariant_density

MIN_BURN_IN = 100


@dataclass
class CorrelationSeries:
    n: np.ndarray
    estimate: np.ndarray  # |covariance|
    stderr: np.ndarray
    method: str  # "monte-carlo" or "exact-matrix"
    signed: np.ndarray | None = None

    def to_csv(self, header: str = "") -> str:
        lines = [header.rstrip("\n")] if header else []
        lines.append("n,estimate,stderr")
        lines += [f"{int(k)},{e:.12e},{s:.12e}" for k, e, s in
                  zip(self.n, self.estimate, self.stderr)]
        return "\n".join(lines) + "\n"


# -- model plumbing -------------------------------------------------------------


def _tower_of(model):
    if isinstance(model, TowerModel):
        return model
    tw = getattr(model, "tower", None)
    if isinstance(tw, TowerModel):
        return tw
    return None


def _is_interval(model):
    return hasattr(model, "alpha0") and hasattr(model, "alpha_amp")


def _cell_values(obs, chain):
    if isinstance(obs, np.ndarray):
        if obs.shape != (chain.n_cells,):
            raise ModelError(f"need {chain.n_cells} cell values")
        return obs.astype(float)
    try:
        return obs.cell_values(chain)
    except UnsupportedOperation as exc:
        raise UnsupportedOperation(f"observable is not a cylinder function: {exc}") from None


def _obs_depth(*obs):
    d = 1
    for o in obs:
        if isinstance(o, np.ndarray):
            continue
        if o.kind == "series":
            d = max(d, o.data["coef"].size)
        elif o.kind == "cells":
            d = max(d, o.data["chain"].depth)
    return d


def _chunk_streams(seed, n, chunk):
    sizes = [min(chunk, n - k) for k in range(0, n, chunk)]
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    return [(s, np.random.default_rng(q)) for s, q in zip(sizes, seqs)]


class _CellSampler:
    """Exact stationary simulation of the depth-``D`` cell process."""

    def __init__(self, tower, depth):
        self.nu = invariant_density(tower, depth)
        self.chain = self.nu.chain
        p = self.nu.cell_measure
        self.p0 = p / p.sum()
        self.cumQ = np.cumsum(self.chain.Q, axis=1)
        self.cumQ[:, -1] = 1.0

    def start(self, rng, n):
        return rng.choice(self.chain.n_cells, size=n, p=self.p0)

    def step(self, cells, rng):
        u = rng.uniform(size=cells.size)
        nxt = np.empty_like(cells)
        rows = self.cumQ[cells]
        nxt[:] = (u[:, None] > rows).sum(axis=1)
        return nxt


def _interval_states(model, rng, n, burn_in):
    x = rng.uniform(0.0, 1.0, n)
    if model.alpha_amp:
        theta = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False)
    else:
        theta = np.zeros(n, dtype=np.uint64)
    stream = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False)
    state = (x, theta, stream)
    left = burn_in
    while left > 0:
        k = min(left, 1024)
        kernels.orbit_block(x, theta, stream, model.alpha0, model.alpha_amp, k)
        left -= k
    return state


def _interval_block(model, state, steps):
    x, theta, stream = state
    return kernels.orbit_block(x, theta, stream, model.alpha0, model.alpha_amp, steps)


def _evaluate(obs, x):
    return np.asarray(obs(x), dtype=float)


# -- exact oracle ----------------------------------------------------------------


def exact_correlation(model, phi, psi, n_max: int, depth: int | None = None,
                      route: str = "tower") -> CorrelationSeries:
    """``Cor_nu(phi, psi o T^n)`` from powers of the exact cell transfer matrix.

    ``route="line"`` uses the interval-image transfer matrix of the oracle's
    line realization instead of the symbolic chain (an independent route to
    the same numbers).
    """
    tower = _tower_of(model)
    if tower is None or tower.base is None:
        raise UnsupportedOperation("exact correlations need a finite tower model")
    depth = max(depth or 1, _obs_depth(phi, psi), tower.base.jacobian_depth)
    nu = invariant_density(tower, depth)
    chain = nu.chain
    f = _cell_values(phi, chain)
    g = _cell_values(psi, chain)
    if route == "tower":
        Q = chain.Q
    elif route == "line":
        line = tower.system
        if line is None or not hasattr(line, "transfer_matrix"):
            raise UnsupportedOperation("model has no line realization")
        Q = line.transfer_matrix(depth)[0]
    else:
        raise ModelError(f"unknown route {route!r}")
    w = nu.cell_measure
    w = w / w.sum()
    Ef, Eg = float(w @ f), float(w @ g)
    out = np.empty(n_max + 1)
    h = g.copy()
    for n in range(n_max + 1):
        out[n] = float(w @ (f * h)) - Ef * Eg
        h = Q @ h
    return CorrelationSeries(np.arange(n_max + 1), np.abs(out), np.zeros(n_max + 1),
                             "exact-matrix", out)


def subdominant_eigenvalue(model, depth: int = 2) -> float:
    """``|lambda_2|`` of the cell transfer matrix."""
    tower = _tower_of(model)
    Q = tower.cell_chain(depth).Q
    ev = np.sort(np.abs(np.linalg.eigvals(Q)))[::-1]
    return float(ev[1]) if ev.size > 1 else 0.0


# -- Monte Carlo correlations ---------------------------------------------------------


def _batch_cov(fsum, gsum, fgsum, counts):
    """Covariance from per-batch sums; returns (estimate, batch stderr)."""
    N = counts.sum()
    est = fgsum.sum(0) / N - (fsum.sum(0) / N) * (gsum.sum(0) / N)
    per = fgsum / counts[:, None] - (fsum / counts[:, None]) * (gsum / counts[:, None])
    B = counts.size
    se = per.std(axis=0, ddof=1) / math.sqrt(B) if B > 1 else np.full(est.shape, np.inf)
    return est, se


def correlation_mc(model, phi, psi, n_max: int, ensemble: int, seed=0,
                   burn_in: int = 1000, window: int | None = None, batches: int = 50,
                   depth: int | None = None, chunk: int = 2000) -> CorrelationSeries:
    """Monte Carlo ``|int phi (psi o f^n) dmu - int phi dmu int psi dmu|``.

    Oracle models: ``ensemble`` independent orbits started from the exact
    invariant measure, one pair ``(phi(x_0), psi(x_n))`` per orbit.
    Interval models: ``ensemble`` orbits after ``burn_in`` steps from the
    uniform law, each contributing the time average over ``window`` starting
    times.  Standard errors are batch means over ``batches`` groups of
    orbits; the absolute value is taken after averaging.
    """
    if burn_in < MIN_BURN_IN and _is_interval(model):
        raise ModelError(f"burn-in {burn_in} is below the minimum {MIN_BURN_IN}")
    if ensemble < 2 * batches:
        batches = max(2, ensemble // 2)
    chunk = max(1, min(chunk, math.ceil(ensemble / batches)))
    nB = math.ceil(ensemble / chunk)
    L = n_max + 1
    fs = np.zeros((nB, L))
    gs = np.zeros((nB, L))
    fg = np.zeros((nB, L))
    cnt = np.zeros(nB)
    tower = _tower_of(model)
    if tower is not None and tower.base is not None:
        depth = max(depth or 1, _obs_depth(phi, psi), tower.base.jacobian_depth)
        sampler = _CellSampler(tower, depth)
        f = _cell_values(phi, sampler.chain)
        g = _cell_values(psi, sampler.chain)
        for b, (size, rng) in enumerate(_chunk_streams(seed, ensemble, chunk)):
            c = sampler.start(rng, size)
            f0 = f[c]
            for n in range(L):
                gn = g[c]
                fs[b, n] = f0.sum()
                gs[b, n] = gn.sum()
                fg[b, n] = (f0 * gn).sum()
                if n < n_max:
                    c = sampler.step(c, rng)
            cnt[b] = size
    elif _is_interval(model):
        T = window or max(1, 4 * (n_max + 1))
        for b, (size, rng) in enumerate(_chunk_streams(seed, ensemble, chunk)):
            state = _interval_states(model, rng, size, burn_in)
            X = _interval_block(model, state, T + n_max)
            F = _evaluate(phi, X[:, :T])
            G = _evaluate(psi, X)
            # lagged products via FFT along each orbit
            nfft = 1 << int(math.ceil(math.log2(T + n_max + T)))
            Ff = np.fft.rfft(F, nfft, axis=1)
            Gf = np.fft.rfft(G, nfft, axis=1)
            cross = np.fft.irfft(np.conj(Ff) * Gf, nfft, axis=1)[:, :L]
            cg = np.cumsum(G, axis=1)
            gsum = cg[:, T - 1 + np.arange(L)] - np.concatenate(
                [np.zeros((size, 1)), cg[:, :L - 1]], axis=1)
            fs[b] = F.sum()
            gs[b] = gsum.sum(0)
            fg[b] = cross.sum(0)
            cnt[b] = size * T
    else:
        raise UnsupportedOperation(f"no sampler for model {getattr(model, 'name', model)!r}")
    est, se = _batch_cov(fs, gs, fg, cnt)
    return CorrelationSeries(np.arange(L), np.abs(est), se, "monte-carlo", est)


def agreement(mc: CorrelationSeries, exact: CorrelationSeries, k: float = 3.0):
    """Fraction of grid points where the signed MC estimate lies within ``k``
    standard errors of the exact value."""
    n = min(mc.n.size, exact.n.size)
    d = np.abs(mc.signed[:n] - exact.signed[:n])
    return float(np.mean(d <= k * mc.stderr[:n])), d / np.maximum(mc.stderr[:n], 1e-300)


# -- rate fits --------------------------------------------------------------------------


LAWS = ("polynomial", "poly-log", "exponential", "stretched-exp", "log-power")
_THREE_PARAM = ("stretched-exp", "log-power")


@dataclass
class RateFit:
    law: str
    params: dict
    residual: float  # held-out RMS in log coordinates
    window: tuple
    scores: dict = field(default_factory=dict)
    log_correction_F: float | None = None

    @property
    def slope(self):
        return self.params.get("exponent")

    def predict(self, n):
        n = np.asarray(n, dtype=float)
        p = self.params
        c = p["log_C"]
        if self.law == "polynomial":
            return np.exp(c + p["exponent"] * np.log(n))
        if self.law == "poly-log":
            return np.exp(c + p["exponent"] * np.log(n)) * np.log(n)
        if self.law == "exponential":
            return np.exp(c - p["rate"] * n)
        if self.law == "stretched-exp":
            return np.exp(c - p["rate"] * n ** p["tau_prime"])
        return np.exp(c - p["rate"] * np.log(n) ** p["tau_prime"])


def _lin(x, y):
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _fit_law(law, n, y, train, test):
    """Fit in linearizing coordinates on ``train``; RMS of log-residuals on ``test``."""
    ln = np.log(n)
    if law == "polynomial":
        c, p = _lin(ln[train], y[train])
        pred = c + p * ln
        params = {"log_C": c, "exponent": p}
    elif law == "poly-log":
        z = y - np.log(ln)
        c, p = _lin(ln[train], z[train])
        pred = c + p * ln + np.log(ln)
        params = {"log_C": c, "exponent": p}
    elif law == "exponential":
        c, r = _lin(n[train], y[train])
        pred = c + r * n
        params = {"log_C": c, "rate": -r}
    else:
        grid = np.linspace(0.05, 0.95, 91) if law == "stretched-exp" else np.linspace(1.05, 6.0, 100)
        best = None
        for tp in grid:
            x = n**tp if law == "stretched-exp" else ln**tp
            c, r = _lin(x[train], y[train])
            res = y[train] - c - r * x[train]
            sse = float(res @ res)
            if best is None or sse < best[0]:
                best = (sse, tp, c, r)
        _, tp, c, r = best
        x = n**tp if law == "stretched-exp" else ln**tp
        pred = c + r * x
        params = {"log_C": c, "rate": -r, "tau_prime": tp}
    res = y[test] - pred[test]
    return params, float(np.sqrt(np.mean(res**2)))


def usable_points(series: CorrelationSeries, k: float = 2.0):
    est = np.asarray(series.estimate, float)
    ok = np.isfinite(est) & (est > 0) & (series.n > 0)
    if np.any(series.stderr > 0):
        ok &= est > k * series.stderr
    else:
        ok &= est > 1e-13 * np.max(est, initial=0)
    return ok


def fit_rate(series: CorrelationSeries, laws=LAWS, window=None, min_points: int = 12,
             f_threshold: float = 4.0) -> RateFit:
    """Fit candidate decay laws and pick the best by held-out residual.

    Usable points are those with ``estimate > 2 stderr`` inside ``window``.
    Even-indexed usable points train, odd-indexed ones score.  Poly-log is
    preferred over polynomial only when the residual-square ratio reaches
    ``f_threshold``; the three-parameter laws must beat the best two-parameter
    law by the same factor.
    """
    ok = usable_points(series)
    n_all = np.asarray(series.n, dtype=float)
    if window is not None:
        ok &= (n_all >= window[0]) & (n_all <= window[1])
    if not ok.any():
        raise NoSignal("all points are below the noise floor")
    if ok.sum() < min_points:
        raise NoSignal(f"only {int(ok.sum())} usable points (need {min_points})")
    n = n_all[ok]
    y = np.log(np.asarray(series.estimate, float)[ok])
    idx = np.arange(n.size)
    train, test = idx % 2 == 0, idx % 2 == 1
    scores = {}
    for law in laws:
        if law == "poly-log" and n.min() <= 1:
            continue
        scores[law] = _fit_law(law, n, y, train, test)
    two = [l for l in scores if l not in _THREE_PARAM]
    if not two:
        raise ModelError("need at least one two-parameter law")
    F = None
    if "polynomial" in scores and "poly-log" in scores:
        F = (scores["polynomial"][1] / max(scores["poly-log"][1], 1e-300)) ** 2
    cand = {l: scores[l][1] for l in two}
    if F is not None and F < f_threshold:
        cand.pop("poly-log", None)
    best = min(cand, key=cand.get)
    three = [l for l in _THREE_PARAM if l in scores]
    if three:
        l3 = min(three, key=lambda l: scores[l][1])
        if scores[l3][1] ** 2 * f_threshold < scores[best][1] ** 2:
            best = l3
    params, r = scores[best]
    return RateFit(best, {k: float(v) for k, v in params.items()}, r,
                   (float(n.min()), float(n.max())),
                   {l: (p, s) for l, (p, s) in scores.items()}, F)


def loglog_slope(n, y, se=None):
    """Weighted least-squares slope of ``log y`` on ``log n`` with its stderr."""
    n = np.asarray(n, float)
    y = np.asarray(y, float)
    x, z = np.log(n), np.log(y)
    if se is None:
        w = np.ones_like(z)
    else:
        rel = np.asarray(se, float) / y
        w = 1.0 / np.maximum(rel, 1e-12) ** 2
    W = w.sum()
    xm, zm = (w * x).sum() / W, (w * z).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    slope = (w * (x - xm) * (z - zm)).sum() / sxx
    resid = z - zm - slope * (x - xm)
    dof = max(n.size - 2, 1)
    s2 = (w * resid**2).sum() / dof
    return float(slope), float(math.sqrt(s2 / sxx))


def envelope_verdict(slope: float, envelope, tol: float) -> bool:
    """PASS when the fitted slope lies within ``tol`` of the envelope slope."""
    if envelope.slope is None:
        raise ModelError("envelope has no power-law slope")
    return abs(slope - envelope.slope) <= tol


# -- Birkhoff sums ------------------------------------------------------------------------


def _birkhoff_blocks(model, phi, n, ensemble, seed, burn_in, chunk, lags):
    """Yield per-chunk (sums over n steps, autocovariance sums up to ``lags``)."""
    tower = _tower_of(model)
    if tower is not None and tower.base is not None:
        depth = max(_obs_depth(phi), tower.base.jacobian_depth)
        sampler = _CellSampler(tower, depth)
        f = _cell_values(phi, sampler.chain)

        def run(rng, size):
            c = sampler.start(rng, size)
            X = np.empty((size, n))
            for t in range(n):
                X[:, t] = f[c]
                if t < n - 1:
                    c = sampler.step(c, rng)
            return X
    elif _is_interval(model):
        if burn_in < MIN_BURN_IN:
            raise ModelError(f"burn-in {burn_in} is below the minimum {MIN_BURN_IN}")

        def run(rng, size):
            state = _interval_states(model, rng, size, burn_in)
            return _evaluate(phi, _interval_block(model, state, n))
    else:
        raise UnsupportedOperation("no sampler for this model")
    for size, rng in _chunk_streams(seed, ensemble, chunk):
        yield run(rng, size)


@dataclass
class CLTReport:
    ks_distance: float
    ks_pvalue: float
    sigma_hat: float
    sigma2_hat: float
    sigma2_stderr: float
    cutoff_K: int
    mean: float
    degenerate: bool
    n: int
    ensemble: int
    samples: np.ndarray = field(repr=False, default=None)


def clt_experiment(model, phi, n: int, ensemble: int, seed=0, burn_in: int = 1000,
                   max_lag: int = 200, chunk: int = 500, mean: float | None = None,
                   batches: int = 20) -> CLTReport:
    """Normalized Birkhoff sums against ``Normal(0, sigma_hat)``.

    ``sigma_hat^2 = C_0 + 2 sum_{k=1}^K C_k`` with the autocovariances
    estimated from the same orbits (time-averaged, batch-mean errors) and
    ``K`` the first lag whose covariance is within 2 standard errors of
    zero.  The mean defaults to the grand ensemble mean.
    """
    max_lag = min(max_lag, n - 1)
    sums, F_tot, cnt = [], 0.0, 0
    auto_b, s1_b, s2_b, cnt_b = [], [], [], []
    for X in _birkhoff_blocks(model, phi, n, ensemble, seed, burn_in, chunk, max_lag):
        sums.append(X.sum(axis=1))
        F_tot += X.sum()
        cnt += X.size
        T = n - max_lag
        nfft = 1 << int(math.ceil(math.log2(2 * n)))
        Ff = np.fft.rfft(X, nfft, axis=1)
        head = np.fft.rfft(X[:, :T], nfft, axis=1)
        cross = np.fft.irfft(np.conj(head) * Ff, nfft, axis=1)[:, : max_lag + 1]
        cg = np.cumsum(X, axis=1)
        lagsum = cg[:, T - 1 + np.arange(max_lag + 1)] - np.concatenate(
            [np.zeros((X.shape[0], 1)), cg[:, :max_lag]], axis=1)
        auto_b.append(cross.sum(0))
        s1_b.append(X[:, :T].sum())
        s2_b.append(lagsum.sum(0))
        cnt_b.append(X.shape[0] * T)
    S = np.concatenate(sums)
    mu = F_tot / cnt if mean is None else float(mean)
    auto_b = np.array(auto_b)
    s2_b = np.array(s2_b)
    s1_b = np.array(s1_b)[:, None]
    cnt_b = np.array(cnt_b, float)
    # regroup chunks into batches for the error bars
    k = max(1, len(cnt_b) // batches)
    groups = [slice(i, i + k) for i in range(0, len(cnt_b), k)]
    cov_b = np.array([auto_b[g].sum(0) / cnt_b[g].sum()
                      - (s1_b[g].sum() / cnt_b[g].sum()) * (s2_b[g].sum(0) / cnt_b[g].sum())
                      for g in groups])
    N = cnt_b.sum()
    cov = auto_b.sum(0) / N - (s1_b.sum() / N) * (s2_b.sum(0) / N)
    se = cov_b.std(axis=0, ddof=1) / math.sqrt(len(groups)) if len(groups) > 1 else np.zeros_like(cov)
    K = max_lag
    for j in range(1, max_lag + 1):
        if abs(cov[j]) < 2 * se[j]:
            K = j - 1
            break
    s2 = float(cov[0] + 2 * cov[1:K + 1].sum())
    s2_err = float(math.sqrt(se[0] ** 2 + 4 * (se[1:K + 1] ** 2).sum()))
    Z = (S - n * mu) / math.sqrt(n)
    if not s2 > 1e-12 * max(abs(cov[0]), 1e-300) or cov[0] <= 1e-28:
        warnings.warn("degenerate variance: sigma^2 estimate is not positive", stacklevel=2)
        return CLTReport(float("nan"), float("nan"), 0.0, s2, s2_err, K, mu, True, n,
                         S.size, Z)
    sig = math.sqrt(s2)
    ks = sps.kstest(Z, "norm", args=(0.0, sig))
    return CLTReport(float(ks.statistic), float(ks.pvalue), sig, s2, s2_err, K, mu, False,
                     n, S.size, Z)


@dataclass
class LDResult:
    n: np.ndarray
    probability: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    one_sided: np.ndarray  # True where no exceedance was seen (upper bound only)
    mean: float
    eps: float
    fit: RateFit | None
    slope: float | None
    slope_stderr: float | None

    def as_series(self) -> CorrelationSeries:
        se = (self.upper - self.lower) / 3.92
        return CorrelationSeries(self.n, self.probability, se, "monte-carlo")


def ld_experiment(model, phi, eps: float, n_grid, ensemble: int, seed=0, burn_in: int = 1000,
                  chunk: int = 1000, mean: float | None = None, fit_window=None) -> LDResult:
    """Empirical ``P(|S_n/n - int phi| > eps)`` on ``n_grid`` with Wilson bands.

    All grid points use the same orbits (partial sums).  The mean defaults to
    the grand mean over the longest sums.  A log-log slope is fitted over
    ``fit_window`` on the points with at least one exceedance; a general
    :func:`fit_rate` is attempted as well.
    """
    from .coupling import wilson_interval

    n_grid = np.asarray(sorted(set(int(k) for k in n_grid)), dtype=np.int64)
    N = int(n_grid.max())
    parts = []
    for X in _birkhoff_blocks(model, phi, N, ensemble, seed, burn_in, chunk, 0):
        cs = np.cumsum(X, axis=1)
        parts.append(cs[:, n_grid - 1])
    P = np.concatenate(parts)
    mu = float(P[:, -1].sum() / (P.shape[0] * N)) if mean is None else float(mean)
    dev = np.abs(P / n_grid[None, :] - mu) > eps
    k = dev.sum(axis=0)
    M = P.shape[0]
    prob = k / M
    lo, hi = wilson_interval(k, M)
    zero = k == 0
    fit = slope = sse = None
    sel = ~zero
    if fit_window is not None:
        sel &= (n_grid >= fit_window[0]) & (n_grid <= fit_window[1])
    if sel.sum() >= 3:
        se = (hi - lo) / 3.92
        slope, sse = loglog_slope(n_grid[sel], prob[sel], se[sel])
    res = LDResult(n_grid, prob, lo, hi, zero, mu, eps, None, slope, sse)
    try:
        fit = fit_rate(res.as_series(), window=fit_window, min_points=min(12, max(3, int(sel.sum()))))
    except NoSignal:
        fit = None
    res.fit = fit
    return res
