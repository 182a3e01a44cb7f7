"""Exit criteria, one test per criterion, each reporting a PASS/FAIL line."""

import time

import numpy as np
import pytest

from wgmlab import coupling as C
from wgmlab import statistics as St
from wgmlab.cli import main
from wgmlab.models import make_model, make_oracle
from wgmlab.observables import (base_observable, cell_observable, class_sequence,
                                level_indicator, lipschitz_observable, normalize_star,
                                series_observable, variation_v)
from wgmlab.tower import invariant_density

pytestmark = pytest.mark.acceptance

# the (R4, tau) fixture: supported in (3/4, 1], tau = 8
R4_FIXTURE = dict(offset=1.0, amplitude=-1.0, smooth=0.0)


def _elapsed(t0):
    return time.perf_counter() - t0


def test_c01_oracle_correlations(criterion):
    t0 = time.perf_counter()
    o1 = make_oracle("oracle-o1")
    phi = series_observable(o1.model, class_sequence("V1", 0.5, 2), seed=3)
    psi = level_indicator([0])
    mc = St.correlation_mc(o1, phi, psi, 20, 100_000, seed=1)
    ex = St.exact_correlation(o1, phi, psi, 20)
    frac, _ = St.agreement(mc, ex, k=3.0)
    dt = _elapsed(t0)
    criterion(1, frac >= 0.95 and dt <= 120,
              f"MC within 3 stderr of exact at {100 * frac:.0f}% of n <= 20 (need 95%), {dt:.0f} s")


def test_c02_skew_tail_exponent(criterion):
    # Known red: first-return times of the skew product follow the fast
    # (alpha_min) side; see the decision ledger for the analysis.
    t0 = time.perf_counter()
    m = make_model("skew-default")
    g = np.unique(np.logspace(2, 4, 21).astype(int))
    s, e, _ = m.tail_survival(g, samples=10**6, seed=0)
    slope, se = St.loglog_slope(g, s, e)
    target = -1 / m.alpha_max
    dt = _elapsed(t0)
    criterion(2, abs(slope - target) <= 0.15 and dt <= 600,
              f"tail slope {slope:.3f} +- {se:.3f}, target {target:.3f} +- 0.15, {dt:.0f} s")


def test_c03_theorem_a_slope(criterion):
    t0 = time.perf_counter()
    m = make_model("pm-const-0.5")
    a = m.tail_exponent
    tau, zeta = 8.0, 1.0
    assert zeta * tau >= a + 2
    phi = base_observable("R4", tau, seed=0, **R4_FIXTURE)
    ser = St.correlation_mc(m, phi, lipschitz_observable(), 1000, 20_000, seed=0, window=4000)
    g = np.unique(np.logspace(1, 3, 25).astype(int))
    g = g[St.usable_points(ser)[g]]
    slope, se = St.loglog_slope(g, ser.estimate[g], ser.stderr[g])
    env = C.rate_envelope(("polynomial", a), "R4", tau, zeta)
    dt = _elapsed(t0)
    criterion(3, abs(slope - env.slope) <= 0.35 and dt <= 1800,
              f"correlation slope {slope:.3f} +- {se:.3f} on {g.size} points in "
              f"[{g.min()}, {g.max()}], envelope {env.slope:.3f} +- 0.35, {dt:.0f} s")


def test_c04_log_correction(criterion):
    t0 = time.perf_counter()
    a, zeta, beta = 3.0, 0.5, 0.5
    tail = C.TailModel("polynomial", {"C": 1.0, "p": a - 1})
    i = np.arange(1, 10_002, dtype=float)
    n = np.unique(np.logspace(2, 4, 15).astype(int))
    envs = {"n^(1-a) log n": C.Envelope("log", lambda x: x ** (1 - a) * np.log(x), 1 - a, 1),
            "n^(1-a)": C.Envelope("pow", lambda x: x ** (1 - a), 1 - a)}

    def bound(tau):
        v = np.concatenate([[1.0], i[:-1] ** -tau])
        seq = C.epsilon_sequence(v, beta, 1.0, i_max=10_000, D_bar=None)
        return C.matching_bound(n, tail, seq, 3.0, 2.0)  # delta_bar / D4 = zeta

    _, _, bands = C.envelope_selection(n, bound((a + 1) / zeta), envs)
    band = bands["n^(1-a) log n"]
    best, _, _ = C.envelope_selection(n, bound((a + 2) / zeta), envs)
    dt = _elapsed(t0)
    criterion(4, band <= 10 and best == "n^(1-a)" and dt <= 60,
              f"band of bound / n^(1-a) log n = {band:.2f} (<= 10); with zeta tau = a + 2 "
              f"the selected envelope is {best}, {dt:.1f} s")


def test_c05_epsilon_sequences(criterion):
    t0 = time.perf_counter()
    i = np.arange(0, 10_001, dtype=float)
    profiles = {
        "0.5^i": 0.5**i,
        "exp(-sqrt i)": np.exp(-np.sqrt(i)),
        "exp(-(log i)^2)": np.exp(-np.log(np.maximum(i, 1.0)) ** 2),
        "i^-3": np.concatenate([[1.0], i[1:] ** -3.0]),
    }
    worst, ok = 0.0, True
    for v in profiles.values():
        seq = C.epsilon_sequence(v, 0.5, 1.0, i_max=10_000, D_bar=2.0)
        ok &= bool(np.isfinite(seq.D3) and np.all(seq.v4 <= seq.D3) and np.all(seq.v5 <= seq.D3))
        ok &= seq.theta < 1
        worst = max(worst, seq.v6_residual)
    dt = _elapsed(t0)
    criterion(5, ok and worst < 0.10 and dt <= 60,
              f"weighted profile and geometric sum bounded to i = 10^4 for 4 profiles; worst envelope residual "
              f"{100 * worst:.2f}% (< 10%), {dt:.1f} s")


def test_c06_coupling_recursion(criterion):
    t0 = time.perf_counter()
    o1 = make_oracle("oracle-o1")
    nu = invariant_density(o1.tower, depth=3)
    star = normalize_star(series_observable(o1.model, class_sequence("V1", 0.5, 3), seed=1), nu)
    rep = C.coupling_report(o1.tower, star, depth=3, samples=0, n_max=200, i_max=50)
    ratio = float(np.max(rep.tv_curve / rep.bound_curve))
    dt = _elapsed(t0)
    criterion(6, rep.monotone and np.isfinite(rep.D4) and rep.bound_holds and dt <= 300,
              f"monotone={rep.monotone}, D4={rep.D4:.4g}, max TV/bound over n <= 200 = "
              f"{ratio:.3g}, {dt:.0f} s")


def test_c07_conditional_lemmas(criterion):
    t0 = time.perf_counter()
    o1 = make_oracle("oracle-o1")
    nu = invariant_density(o1.tower, depth=3)
    star = normalize_star(series_observable(o1.model, class_sequence("V1", 0.5, 3), seed=1), nu)
    prod = C.product_model(o1.tower, star.cell_values(nu.chain) * nu.values, nu.values, 3)
    rep = C.conditional_lemmas(prod, samples=2_000_000, seed=0, min_samples=10_000)
    dt = _elapsed(t0)
    ok = rep.groups_tested > 0 and rep.eps0_min >= 0.01 and np.isfinite(rep.D1) and dt <= 600
    criterion(7, ok, f"min P(S = tau_k | cell) = {rep.eps0_min:.4f} over {rep.groups_tested} "
                     f"cells (k <= 6), D1 = {rep.D1:.3g}, {dt:.0f} s")


def test_c08_clt(criterion):
    t0 = time.perf_counter()
    m = make_model("pm-const-0.4")
    phi = base_observable("R4", 8.0, seed=0, **R4_FIXTURE)
    r = St.clt_experiment(m, phi, 10_000, 10_000, seed=0)
    dt = _elapsed(t0)
    criterion(8, (not r.degenerate) and r.ks_distance < 0.02 and dt <= 1200,
              f"KS = {r.ks_distance:.4f} (< 0.02), sigma^2 = {r.sigma2_hat:.4f} +- "
              f"{r.sigma2_stderr:.4f}, {dt:.0f} s")


def test_c09_large_deviations(criterion):
    t0 = time.perf_counter()
    m = make_model("pm-const-0.5")
    a = m.tail_exponent
    phi = base_observable("R4", 8.0, seed=0, **R4_FIXTURE)
    g = np.unique(np.logspace(2, np.log10(5000), 16).astype(int))
    r = St.ld_experiment(m, phi, 0.1, g, 40_000, seed=0, fit_window=(300, 5000))
    dt = _elapsed(t0)
    limit = -(a - 1) + 0.35
    criterion(9, r.slope is not None and r.slope <= limit and dt <= 1200,
              f"LD slope {r.slope:.3f} +- {r.slope_stderr:.3f} (<= {limit:.3f}), {dt:.0f} s")


def test_c10_sandwich_and_regularity(criterion):
    t0 = time.perf_counter()
    o1 = make_oracle("oracle-o1")
    D = 3
    nu = invariant_density(o1.tower, depth=D)
    ch = nu.chain
    C_rho, C0 = nu.regularity_constant, nu.upper_bound
    rng = np.random.default_rng(2024)
    lo, hi, worst = np.inf, -np.inf, -np.inf
    n = np.arange(D + 1)
    for _ in range(1000):
        vals = rng.uniform(-1, 1, ch.n_cells) * 10 ** rng.uniform(-3, 3)
        phi = cell_observable(ch, vals)
        star = normalize_star(phi, nu).cell_values(ch)
        lo, hi = min(lo, star.min()), max(hi, star.max())
        v_prod = variation_v(cell_observable(ch, star * nu.values), o1.tower, D, depth=D).v
        v_phi = variation_v(phi, o1.tower, D, depth=D).v
        rhs = 3 * C_rho * o1.model.beta**n + C0 * v_phi
        worst = max(worst, float(np.max(v_prod - rhs)))
    dt = _elapsed(t0)
    ok = lo >= 1 / 3 - 1e-12 and hi <= 3 + 1e-12 and worst <= 1e-12 and dt <= 60
    criterion(10, ok, f"phi* in [{lo:.4f}, {hi:.4f}] over 1000 observables; max excess in "
                      f"the variation lemma {worst:.3g} (C_rho = {C_rho:.4g}, C0 = {C0:.4g}), "
                      f"{dt:.1f} s")


def test_c11_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    runs = {"oracle": "model = oracle-o1\nseed = 11\n",
            "interval": "model = pm-const-0.5\nseed = 11\nensemble = 2000\nn_max = 200\n"}
    same, files = True, 0
    for name, text in runs.items():
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(text)
        outs = [tmp_path / f"{name}-{k}" for k in (1, 2)]
        for out in outs:
            main(["verify-theorem-a", "--config", str(cfg), "--out", str(out)])
        csvs = sorted(p.name for p in outs[0].glob("*.csv"))
        files += len(csvs)
        same &= bool(csvs) and csvs == sorted(p.name for p in outs[1].glob("*.csv"))
        same &= all((outs[0] / c).read_bytes() == (outs[1] / c).read_bytes() for c in csvs)
    dt = _elapsed(t0)
    criterion(11, same, f"{files} CSVs byte-identical across repeated verify-theorem-a runs, "
                        f"{dt:.0f} s")
