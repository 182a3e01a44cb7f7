"""Observables, their regularity moduli and the four class templates.

Base-space classes (R1-R4) are measured by the oscillation modulus
``R_eps(phi) = sup{|phi(x) - phi(y)| : d(x, y) <= eps}``, tower classes
(V1-V4) by the separation variation
``v_n(phi) = sup{|phi(x) - phi(y)| : s(x, y) >= n}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .errors import (HypothesisFailure, InsufficientResolution, ModelError,
                     UnsupportedOperation)

V_CLASSES = ("V1", "V2", "V3", "V4")
R_CLASSES = ("R1", "R2", "R3", "R4")
LOCALLY_CONSTANT = "locally-constant"


def check_class(cls: str, tau: float):
    """Raise unless ``tau`` is legal for ``cls``."""
    if cls not in V_CLASSES + R_CLASSES:
        raise ModelError(f"unknown class {cls!r}")
    if cls[1] in "12":
        if not 0 < tau < 1:
            raise ModelError(f"{cls} needs tau in (0, 1), got {tau}")
    elif not tau > 1:
        raise ModelError(f"{cls} needs tau > 1, got {tau}")


def v_template(cls: str, tau: float, n) -> np.ndarray:
    """Class template in ``n`` (``n >= 1``)."""
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if cls == "V1":
            return tau**n
        if cls == "V2":
            return np.exp(-(n**tau))
        if cls == "V3":
            return np.exp(-np.log(np.maximum(n, 1.0)) ** tau)
        if cls == "V4":
            return np.maximum(n, 1.0) ** (-tau)
    raise ModelError(f"unknown class {cls!r}")


def r_template(cls: str, tau: float, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    L = np.abs(np.log(eps))
    with np.errstate(divide="ignore", invalid="ignore"):
        if cls == "R1":
            return eps**tau
        if cls == "R2":
            return np.exp(-(L**tau))
        if cls == "R3":
            return np.exp(-np.log(L) ** tau)
        if cls == "R4":
            return L ** (-tau)
    raise ModelError(f"unknown class {cls!r}")


# -- the observable container ----------------------------------------------


@dataclass(frozen=True, eq=False)
class Observable:
    """A bounded observable with its declared regularity class.

    ``kind`` is ``"series"`` (tower itineraries), ``"cells"`` (values on the
    cells of a :class:`~wgmlab.tower.CellChain`) or ``"base"`` (real
    coordinates of an interval model).
    """

    evaluator: Callable
    declared_class: str | None
    tau: float | None
    modulus_constant: float
    sup_norm_bound: float
    R_infinity: float | None = None
    kappa: float = 1.0
    kind: str = "base"
    data: dict = field(default_factory=dict, repr=False)

    def __call__(self, p):
        return self.evaluator(p)

    def cell_values(self, chain) -> np.ndarray:
        """Exact values on the cells of ``chain``."""
        if self.kind == "cells":
            if self.data.get("chain") is not chain:
                raise InsufficientResolution("observable belongs to a different cell chain")
            return np.asarray(self.data["values"], float)
        if self.kind == "series":
            D = self.data["coef"].size
            if D > chain.depth:
                raise InsufficientResolution(
                    f"observable has depth {D} but the chain resolves {chain.depth}"
                )
            W = chain.words[chain.word_index]
            return _series_eval(self.data["coef"], self.data["signs"], W)
        if self.kind == "levels":
            return np.asarray(self.data["level_values"], float)[chain.level]
        if "constant" in self.data:
            return np.full(chain.n_cells, self.data["constant"])
        raise UnsupportedOperation(f"{self.kind!r} observables are not cylinder functions")


def cell_observable(chain, values, declared_class=None, tau=None) -> Observable:
    values = np.asarray(values, dtype=float)
    if values.shape != (chain.n_cells,):
        raise ModelError(f"need {chain.n_cells} cell values")

    def ev(p):
        return float(values[chain.cell_of(p.level, p.base)])

    sup = float(np.abs(values).max())
    return Observable(ev, declared_class, tau, float(np.ptp(values)), sup,
                      float(np.ptp(values)), kind="cells",
                      data={"chain": chain, "values": values})


def level_indicator(levels) -> Observable:
    """Indicator of a set of tower levels (e.g. the base ``{0}``)."""
    levels = set(int(l) for l in np.atleast_1d(levels))
    H = max(levels) + 1

    def ev(p):
        return 1.0 if p.level in levels else 0.0

    vals = np.zeros(4096)
    vals[list(levels)] = 1.0
    return Observable(ev, "V1", 0.5, 1.0, 1.0, 1.0, kind="levels",
                      data={"level_values": vals})


def _series_eval(coef, signs, W) -> np.ndarray:
    W = np.atleast_2d(W)
    D = coef.size
    if W.shape[1] < D:
        raise InsufficientResolution(f"need {D} symbols, got {W.shape[1]}")
    k = np.arange(D)
    return 0.5 * (coef[None, :] * signs[k[None, :], W[:, :D]]).sum(axis=1)


def class_sequence(cls: str, tau: float, depth: int) -> np.ndarray:
    """``a_0..a_{depth-1}`` with ``a_0 = 1`` and ``a_n`` the class template."""
    n = np.arange(depth, dtype=float)
    a = np.ones(depth)
    if depth > 1:
        a[1:] = np.minimum(1.0, v_template("V" + cls[1], tau, n[1:]))
    return np.minimum.accumulate(a)


def series_observable(model, a, seed=0, declared_class=None, tau=None) -> Observable:
    """``phi = sum_k (a_k - a_{k+1}) g_k(x_k)`` with ``g_k`` a seeded
    ``+-1/2`` function of the ``k``-th symbol and ``a_D = 0``.

    Symbols 0 and 1 always receive opposite signs, and every image must
    contain both, so that ``v_n(phi) = a_n`` exactly.
    """
    a = np.asarray(a, dtype=float)
    if np.any(np.diff(a) > 0) or np.any(a < 0):
        raise ModelError("a must be non-negative and non-increasing")
    n = model.alphabet_size
    if n < 2 or not all({0, 1} <= set(img) for img in model.images):
        raise UnsupportedOperation("series fixtures need symbols 0 and 1 in every image")
    D = a.size
    coef = a - np.concatenate([a[1:], [0.0]])
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(D, n))
    signs[:, 1] = -signs[:, 0]

    def ev(p):
        return float(_series_eval(coef, signs, np.asarray(p.base)[None, :])[0])

    return Observable(ev, declared_class, tau, 1.0, 0.5 * a[0], float(a[0]),
                      kind="series", data={"coef": coef, "signs": signs, "model": model})


# -- base-space fixtures -----------------------------------------------------


def _singular_part(cls, tau, d):
    """Increasing function of the distance ``d`` to the anchor, zero at 0,
    whose oscillation modulus is the class template."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if cls == "R1":
            g = np.minimum(d, 1.0) ** tau
        elif cls == "R2":
            g = np.exp(-np.abs(np.log(np.minimum(d, 1.0))) ** tau)
        elif cls == "R3":
            L = np.log(1.0 / np.minimum(d, 1.0)) + math.e
            g = np.exp(-np.log(L) ** tau)
        elif cls == "R4":
            # (log2(1/d) - 1)^(-tau), capped at 1 for d >= 1/4
            L = np.log2(1.0 / np.maximum(d, 1e-300)) - 1.0
            g = np.maximum(L, 1.0) ** (-tau)
        else:
            raise ModelError(f"unknown base class {cls!r}")
    return np.where(d > 0, g, 0.0)


def base_observable(cls, tau, seed=0, anchor=1.0, amplitude=1.0, smooth=0.3,
                    kappa=1.0, offset=0.0) -> Observable:
    """Interval observable ``offset + smooth cos(2 pi x + phase) + amplitude g(|x - anchor|)``.

    With ``offset=1, amplitude=-1, smooth=0`` and the R4 profile the result
    vanishes on ``[0, anchor - 1/4]``.
    """
    check_class(cls, tau)
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0, 2 * np.pi))

    def ev(x):
        x = np.asarray(x, dtype=float)
        return offset + smooth * np.cos(2 * np.pi * x + phase) + amplitude * _singular_part(
            cls, tau, np.abs(x - anchor))

    sup = abs(offset) + abs(smooth) + abs(amplitude)
    return Observable(ev, cls, tau, abs(amplitude) + 2 * np.pi * abs(smooth), sup,
                      2 * sup, kappa, kind="base",
                      data={"anchors": [anchor], "cls": cls, "tau": tau, "offset": offset,
                            "amplitude": amplitude, "smooth": smooth, "phase": phase})


def lipschitz_observable(slope=1.0, offset=0.0) -> Observable:
    def ev(x):
        return offset + slope * np.asarray(x, dtype=float)

    return Observable(ev, "R1", 0.999, abs(slope), abs(offset) + abs(slope),
                      abs(slope), kind="base", data={"anchors": []})


def constant_observable(c=1.0) -> Observable:
    def ev(x):
        if hasattr(x, "level"):
            return float(c)
        return np.full(np.shape(x), float(c))

    return Observable(ev, LOCALLY_CONSTANT, None, 0.0, abs(c), 0.0, kind="base",
                      data={"anchors": [], "constant": float(c)})


def make_observable(cls: str, tau: float, seed: int = 0, target=None, depth: int = 12,
                    **kw) -> Observable:
    """Fixture with prescribed regularity.

    ``target`` is a :class:`~wgmlab.symbolic.SymbolicModel` (or a tower over
    one) for V classes, and ignored for R classes, which live on ``[0, 1]``.
    """
    check_class(cls, tau)
    if cls in R_CLASSES:
        return base_observable(cls, tau, seed, **kw)
    model = getattr(target, "base", target)
    if model is None or not hasattr(model, "images"):
        raise ModelError("V-class fixtures need a symbolic model")
    return series_observable(model, class_sequence(cls, tau, depth), seed, cls, tau)


# -- moduli ------------------------------------------------------------------


@dataclass
class VariationProfile:
    v: np.ndarray
    measured_on: str
    depth: int | None
    exact: bool = True

    @property
    def n(self):
        return np.arange(self.v.size)


def _cells_variation(chain, values, n_max):
    v = np.zeros(n_max + 1)
    v[0] = float(np.ptp(values))
    W = chain.words[chain.word_index]
    for n in range(1, min(n_max, chain.depth - 1) + 1):
        keys = np.column_stack([chain.level, W[:, :n]])
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        hi = np.full(inv.max() + 1, -np.inf)
        lo = np.full(inv.max() + 1, np.inf)
        np.maximum.at(hi, inv, values)
        np.minimum.at(lo, inv, values)
        v[n] = float((hi - lo).max())
    return v


def _series_variation(model, coef, signs, n_max):
    D = coef.size
    n_sym = model.alphabet_size
    g = 0.5 * coef[:, None] * signs  # (D, n_sym)
    mx = np.zeros((D + 1, n_sym))
    mn = np.zeros((D + 1, n_sym))
    for k in range(D - 1, -1, -1):
        nxt_mx = np.array([mx[k + 1, list(img)].max() for img in model.images]) \
            if k + 1 < D else np.zeros(n_sym)
        nxt_mn = np.array([mn[k + 1, list(img)].min() for img in model.images]) \
            if k + 1 < D else np.zeros(n_sym)
        mx[k] = g[k] + nxt_mx
        mn[k] = g[k] + nxt_mn
    v = np.zeros(n_max + 1)
    v[0] = mx[0].max() - mn[0].min()
    for n in range(1, min(n_max, D - 1) + 1):
        v[n] = max(mx[n, list(img)].max() - mn[n, list(img)].min() for img in model.images)
    return v


def variation_v(phi: Observable, tower, n_max: int, depth: int | None = None) -> VariationProfile:
    """Exact ``v_n(phi)`` for ``n = 0..n_max`` on a finite tower."""
    name = getattr(getattr(tower, "base", None), "name", "tower")
    if phi.kind == "series":
        model = phi.data["model"]
        v = _series_variation(model, phi.data["coef"], phi.data["signs"], n_max)
        return VariationProfile(np.maximum.accumulate(v[::-1])[::-1], name,
                                phi.data["coef"].size)
    if phi.kind in ("cells", "levels"):
        chain = phi.data.get("chain") if phi.kind == "cells" else tower.cell_chain(depth or 1)
        v = _cells_variation(chain, phi.cell_values(chain), n_max)
        return VariationProfile(v, name, chain.depth)
    if phi.data.get("constant") is not None:
        return VariationProfile(np.zeros(n_max + 1), name, 0)
    raise InsufficientResolution("observable is not cylinder-measurable; use pullback_variation")


def modulus_R(phi: Observable, eps_grid, samples: int = 10_000, seed=0, domain=(0.0, 1.0),
              metric=True):
    """Monte Carlo lower estimate of ``R_eps(phi)`` on an interval.

    Half of the pairs are centred on the observable's anchor points.  The
    result is made non-decreasing in ``eps`` by a cumulative maximum.
    """
    if not metric or phi.kind != "base":
        raise UnsupportedOperation("modulus_R needs an observable on a metric space")
    eps_grid = np.asarray(eps_grid, dtype=float)
    order = np.argsort(eps_grid)
    rng = np.random.default_rng(seed)
    lo, hi = domain
    anchors = list(phi.data.get("anchors", []))
    est = np.zeros(eps_grid.size)
    for j, idx in enumerate(order):
        eps = eps_grid[idx]
        k = samples // 2 if anchors else 0
        x = np.empty(samples)
        x[: samples - k] = rng.uniform(lo, hi, samples - k)
        if k:
            a = np.asarray(anchors)[rng.integers(0, len(anchors), k)]
            x[samples - k:] = a + eps * rng.uniform(-1, 1, k) * rng.uniform(0, 1, k) ** 4
        step = eps * rng.choice([-1.0, 1.0], samples) * np.sqrt(rng.uniform(0, 1, samples))
        step[: min(samples, 16)] = eps * np.sign(step[: min(samples, 16)])
        x = np.clip(x, lo, hi)
        y = np.clip(x + step, lo, hi)
        # include the anchor itself against its eps-neighbours
        if anchors:
            xa = np.repeat(np.asarray(anchors, float), 2)
            ya = np.clip(xa + eps * np.tile([-1.0, 1.0], len(anchors)), lo, hi)
            x = np.concatenate([x, xa])
            y = np.concatenate([y, ya])
        est[idx] = float(np.max(np.abs(phi(x) - phi(y))))
    est[order] = np.maximum.accumulate(est[order])
    return list(zip(eps_grid.tolist(), est.tolist()))


# -- classification ----------------------------------------------------------


@dataclass
class ClassFit:
    cls: str
    tau: float
    constant: float
    residual: float
    ambiguous: bool
    scores: dict

    def __iter__(self):
        return iter((self.cls, self.tau, self.constant))


def _fit_linear(x, y):
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    return coef, float(np.sqrt(np.mean(r**2)))


def _fit_v(cls, n, y):
    """Fit ``y = log v`` to ``c + log template``; return (tau, c, rms)."""
    if cls == "V1":
        (c, s), rms = _fit_linear(n, y)
        return math.exp(s), c, rms
    if cls == "V4":
        (c, s), rms = _fit_linear(np.log(n), y)
        return -s, c, rms
    if cls == "V2":
        feat = lambda t: n**t  # noqa: E731
        bounds = (0.02, 0.98)
    else:
        feat = lambda t: np.log(n) ** t  # noqa: E731
        bounds = (1.02, 8.0)

    def rms(t):
        c = np.mean(y + feat(t))
        return float(np.sqrt(np.mean((y + feat(t) - c) ** 2)))

    grid = np.linspace(*bounds, 97)
    t0 = grid[int(np.argmin([rms(t) for t in grid]))]
    h = grid[1] - grid[0]
    res = minimize_scalar(rms, bounds=(max(bounds[0], t0 - h), min(bounds[1], t0 + h)),
                          method="bounded", options={"xatol": 1e-7})
    t = float(res.x)
    return t, float(np.mean(y + feat(t))), rms(t)


def classify(profile, n=None, ambiguity: float = 0.05, min_points: int = 8) -> ClassFit:
    """Best class template for a variation profile (``v_n`` indexed from 0).

    Accepts a :class:`VariationProfile`, a sequence ``v_0, v_1, ...`` or, with
    ``n`` given, values at arbitrary ``n >= 1``.  Residuals are RMS errors in
    ``log v`` divided by the spread of ``log v``; the fit is ambiguous when the
    runner-up is within ``ambiguity`` of the best.
    """
    v = profile.v if isinstance(profile, VariationProfile) else np.asarray(profile, float)
    if n is None:
        n = np.arange(v.size, dtype=float)
    n = np.asarray(n, dtype=float)
    keep = (n >= 1) & (v > 0) & np.isfinite(v)
    if not np.any(v[n >= 1] > 0) if np.any(n >= 1) else True:
        return ClassFit(LOCALLY_CONSTANT, float("nan"), 0.0, 0.0, False, {})
    n, y = n[keep], np.log(v[keep])
    if n.size < min_points:
        raise InsufficientResolution(f"need {min_points} positive points, have {n.size}")
    spread = float(np.std(y)) or 1.0
    scores = {}
    for cls in V_CLASSES:
        tau, c, rms = _fit_v(cls, n, y)
        scores[cls] = (tau, math.exp(c), rms / spread)
    order = sorted(scores, key=lambda k: scores[k][2])
    best, second = order[0], order[1]
    amb = scores[second][2] - scores[best][2] <= ambiguity
    tau, C, r = scores[best]
    return ClassFit(best, tau, C, r, bool(amb), scores)


def classify_modulus(pairs, **kw) -> ClassFit:
    """Classify an ``(eps, R_eps)`` list into R1-R4 via ``n = |log eps|``."""
    eps, R = (np.asarray(a, float) for a in zip(*pairs))
    fit = classify(R, n=np.abs(np.log(eps)), **kw)
    if fit.cls == LOCALLY_CONSTANT:
        return fit
    tau = -math.log(fit.tau) if fit.cls == "V1" else fit.tau
    return replace(fit, cls="R" + fit.cls[1], tau=tau)


def accepts(profile, cls: str, tau: float, slack: float = 2.0) -> bool:
    """Whether ``v_n = O(template)`` on the observed range: the ratio to the
    template on the second half never exceeds ``slack`` times its maximum on
    the first half."""
    v = profile.v if isinstance(profile, VariationProfile) else np.asarray(profile, float)
    n = np.arange(v.size)
    k = n >= 1
    ratio = v[k] / v_template(cls, tau, n[k])
    h = ratio.size // 2
    if h == 0:
        return True
    return bool(ratio[h:].max() <= slack * max(ratio[:h].max(), 1e-300))


# -- pullback to the tower ---------------------------------------------------


def pullback_variation(phi: Observable, system, n_max: int = 40, samples: int = 20_000,
                       seed=0, max_level: int = 64) -> VariationProfile:
    """Monte Carlo ``v_n(phi o pi)`` on the tower of an interval model.

    Pairs ``(x, y)`` in a common base element are drawn at log-uniform
    distances; the pair is lifted to a common level ``l < R`` and compared
    through ``f^l``.  The suffix maximum over separation times gives a
    non-increasing lower estimate of ``v_n``.
    """
    rng = np.random.default_rng(seed)
    anchors = [a for a in phi.data.get("anchors", []) if system.in_base(np.array([a]))[0]]
    x = system.sample_base(rng, samples)
    if anchors:
        k = samples // 2
        a = np.asarray(anchors)[rng.integers(0, len(anchors), k)]
        x[:k] = a - rng.uniform(0, 1, k) * 2.0 ** -rng.uniform(1, n_max + 4, k)
    delta = 2.0 ** -rng.uniform(1, n_max + 6, samples) * rng.choice([-1.0, 1.0], samples)
    y = x + delta
    ok = system.in_base(x) & system.in_base(y) & (system.symbol(x) == system.symbol(y))
    x, y = x[ok], y[ok]
    _, R = system.induced(x)
    # separation time of the pair
    s = np.full(x.size, n_max + 1, dtype=np.int64)
    alive = np.ones(x.size, dtype=bool)
    a, b = x.copy(), y.copy()
    for k in range(n_max + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        same = system.symbol(a[idx]) == system.symbol(b[idx])
        s[idx[~same]] = k
        alive[idx[~same]] = False
        idx = np.flatnonzero(alive)
        a[idx], _ = system.induced(a[idx])
        b[idx], _ = system.induced(b[idx])
    # lift to a random level below R (level 0 for the anchored half)
    lev = np.minimum((rng.uniform(0, 1, x.size) * np.minimum(R, max_level)).astype(int),
                     np.maximum(R - 1, 0))
    if anchors:
        lev[: min(samples // 2, lev.size)] = 0
    fa, fb = x.copy(), y.copy()
    for j in range(int(lev.max(initial=0))):
        m = lev > j
        fa[m] = system.f(fa[m])
        fb[m] = system.f(fb[m])
    diff = np.abs(phi(fa) - phi(fb))
    v = np.zeros(n_max + 2)
    np.maximum.at(v, np.minimum(s, n_max + 1), diff)
    v = np.maximum.accumulate(v[::-1])[::-1][: n_max + 1]
    return VariationProfile(v, getattr(system, "name", "interval"), None, exact=False)


@dataclass
class PullbackReport:
    base_class: str
    tau: float
    measured: ClassFit
    tau_hat: float
    passes: bool
    profile: VariationProfile


def pullback_check(phi: Observable, system, n_max: int = 40, samples: int = 20_000,
                   seed=0, expansion=None, fit_from: int = 4) -> PullbackReport:
    """Measure the tower class of ``phi o pi`` against the base class of ``phi``.

    ``(R4, tau)`` must pull back to ``(V4, tau_hat)`` with
    ``tau_hat >= tau - 0.1``; ``(Ri, tau)`` for ``i <= 3`` to ``Vi``.
    """
    from .symbolic import check_expansion

    if expansion is None:
        expansion = check_expansion(system, samples=1000, seed=seed)
    if not expansion.passes:
        raise HypothesisFailure(
            f"expansion not verified ({expansion.violations} violations); lemma hypotheses unmet"
        )
    prof = pullback_variation(phi, system, n_max, samples, seed)
    cls = phi.declared_class
    if cls == LOCALLY_CONSTANT or not np.any(prof.v > 0):
        fit = ClassFit(LOCALLY_CONSTANT, float("nan"), 0.0, 0.0, False, {})
        return PullbackReport(cls, phi.tau, fit, float("nan"), bool(np.all(prof.v == 0)), prof)
    n = np.arange(prof.v.size, dtype=float)
    sel = n >= fit_from
    fit = classify(prof.v[sel], n=n[sel])
    target = "V" + cls[1]
    tau_hat = fit.scores[target][0]
    if cls == "R4":
        ok = tau_hat >= phi.tau - 0.1
    elif cls == "R1":
        ok = fit.cls == "V1" or (fit.ambiguous and fit.scores["V1"][2] - fit.residual <= 0.05)
    else:
        ok = fit.cls == target or accepts(prof.v, target, min(tau_hat, phi.tau))
    return PullbackReport(cls, phi.tau, fit, tau_hat, bool(ok), prof)


# -- normalisation and the I+ space -------------------------------------------


def normalize_star(phi: Observable, nu) -> Observable:
    """``phi* = (phi + 2||phi|| + 1) / int (phi + 2||phi|| + 1) d nu`` on cells."""
    chain = nu.chain
    vals = phi.cell_values(chain)
    if not np.any(vals != 0):
        raise ModelError("phi vanishes identically")
    sup = float(np.abs(vals).max())
    shifted = vals + 2 * sup + 1
    star = shifted / nu.integrate(shifted)
    obs = cell_observable(chain, star)
    return replace(obs, declared_class=phi.declared_class, tau=phi.tau,
                   data={**obs.data, "source": phi})


K1_PRIME = math.log(9.0) / (8.0 / 9.0)  # max of |log r|/|r - 1| on [1/9, 9], attained at 1/9


def k2_prime(C: float) -> float:
    """``max |r - 1| / |log r|`` over ``0 < r <= 9 e^C`` (increasing in r)."""
    top = 9.0 * math.exp(C)
    return (top - 1.0) / math.log(top)


@dataclass
class IPlusReport:
    C_prime: float
    C_second: float
    log_constant: float
    reference: tuple
    violations: list
    log_violations: list
    pairs: int

    @property
    def passes(self) -> bool:
        return not self.violations and not self.log_violations


def _eta_pairs(chain):
    """Index pairs of distinct cells in a common η-element with their separation."""
    W = chain.words[chain.word_index]
    keys = chain.level * chain.tower.base.alphabet_size + chain.symbol
    I, J, S = [], [], []
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        if idx.size < 2:
            continue
        Wk = W[idx]
        diff = Wk[:, None, :] != Wk[None, :, :]
        s = np.argmax(diff, axis=2)
        a, b = np.nonzero(diff.any(axis=2))
        I.append(idx[a])
        J.append(idx[b])
        S.append(s[a, b])
    if not I:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(I), np.concatenate(J), np.concatenate(S)


def iplus_membership(psi, chain, v_phi, beta: float, C_rho: float,
                     reference: tuple | None = None) -> IPlusReport:
    """Check the ``I+`` ratio bound for a positive cell density ``psi``.

    ``v_phi`` is the variation profile entering the bound (for ``psi = phi* rho``
    that of ``phi``), ``C_rho`` the log-regularity constant of ``rho``.  The
    smallest ``(C', C'')`` (minimising ``C' + C''``) is fitted by linear
    programming; violations are listed against ``reference``, by default
    ``(3 K1' K2', K2' C_rho)``, together with the log-form bound
    ``|log psi(x)/psi(y)| <= 3 K1' v_s + C_rho beta^s``.
    """
    psi = np.asarray(psi, dtype=float)
    if np.any(~(psi > 0)):
        raise ModelError("psi must be positive on every cell")
    v = v_phi.v if isinstance(v_phi, VariationProfile) else np.asarray(v_phi, float)
    I, J, S = _eta_pairs(chain)
    if I.size == 0:
        return IPlusReport(0.0, 0.0, 0.0, reference or (0.0, 0.0), [], [], 0)
    vs = np.where(S < v.size, v[np.minimum(S, v.size - 1)], 0.0)
    bs = beta ** S.astype(float)
    lhs = np.abs(psi[I] / psi[J] - 1.0)
    # minimise C' + C'' subject to C' vs + C'' bs >= lhs
    res = linprog([1.0, 1.0], A_ub=-np.column_stack([vs, bs]), b_ub=-lhs,
                  bounds=[(0, None), (0, None)], method="highs")
    Cp, Cs = (res.x if res.success else (np.inf, np.inf))
    K2 = k2_prime(C_rho)
    ref = reference or (3 * K1_PRIME * K2, K2 * C_rho)
    tol = 1e-12
    bad = np.flatnonzero(lhs > ref[0] * vs + ref[1] * bs + tol)
    llhs = np.abs(np.log(psi[I] / psi[J]))
    lbad = np.flatnonzero(llhs > 3 * K1_PRIME * vs + C_rho * bs + tol)
    lconst = float(np.max(np.where(vs > 0, np.maximum(llhs - C_rho * bs, 0) / np.where(vs > 0, vs, 1), 0)))
    viol = [(int(I[k]), int(J[k]), int(S[k]), float(lhs[k])) for k in bad]
    lviol = [(int(I[k]), int(J[k]), int(S[k]), float(llhs[k])) for k in lbad]
    return IPlusReport(float(Cp), float(Cs), lconst, tuple(ref), viol, lviol, int(I.size))
