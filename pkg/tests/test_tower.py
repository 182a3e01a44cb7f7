import numpy as np
import pytest
from hypothesis import given, strategies as st

from wgmlab.errors import OutOfRange, TruncationError, UnsupportedOperation
from wgmlab.models import make_oracle
from wgmlab.symbolic import SymbolicModel
from wgmlab.tower import (TowerPoint, build_tower, hat_R_tail, hat_R_tail_array,
                          invariant_density, project_pi, tower_from_levels, tower_jacobian,
                          tower_separation, tower_step)

from conftest import random_model


# -- construction ----------------------------------------------------------------


def test_r_equiv_one_tower_is_base():
    m = SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 1], element_mass=[0.5, 0.5])
    tw = build_tower(m)
    assert tw.levels == 1 and np.allclose(tw.level_mass, [1.0])
    assert tw.partition_eta == ((0, 0), (0, 1))


def test_oracle_level_mass(o1):
    np.testing.assert_allclose(o1.tower.level_mass, [1.0, 0.5, 0.25], rtol=0, atol=1e-15)
    assert set(o1.tower.partition_eta) == {(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)}


def _geometric_model(N=40):
    # m{R > n} = 2^-n: symbol k has R = k + 1 and mass 2^-(k+1)
    masses = 2.0 ** -np.arange(1, N + 1)
    images = [[0, 1]] * N
    return SymbolicModel(images=images, return_time=np.arange(1, N + 1), element_mass=masses,
                         delta0=0.5)


def test_truncation_tolerance():
    m = _geometric_model()
    # oracle: mass above level 20 is sum_i m_i max(0, R_i - 21)
    R, ms = m.return_time, m.element_mass
    trunc = float(np.sum(ms * np.maximum(0, R - 21)))
    assert 1e-7 < trunc < 1e-5
    tw = build_tower(m, height_cap=20, tail_tol=1e-5)
    assert tw.truncated_mass == pytest.approx(trunc)
    with pytest.raises(TruncationError) as exc:
        build_tower(m, height_cap=20, tail_tol=1e-7)
    assert exc.value.tail_mass == pytest.approx(trunc)


@given(st.integers(0, 10_000))
def test_kac_consistency(seed):
    m = random_model(np.random.default_rng(seed))
    tw = build_tower(m)
    assert tw.level_mass.sum() == pytest.approx(float(m.element_mass @ m.return_time))
    assert np.all(np.diff(tw.level_mass) <= 0)
    assert tw.level_mass[0] == pytest.approx(m.element_mass.sum())
    for lev, i in tw.partition_eta:
        assert m.return_time[i] > lev


# -- dynamics ---------------------------------------------------------------------


def test_climb_then_return(o1):
    tw = o1.tower
    p = TowerPoint((2, 0, 1, 0), 0)
    p1 = tower_step(tw, p)
    p2 = tower_step(tw, p1)
    p3 = tower_step(tw, p2)
    assert (p1.level, p2.level) == (1, 2) and p3 == TowerPoint((0, 1, 0), 0)
    assert tower_step(tw, TowerPoint((0, 1), 0)) == TowerPoint((1,), 0)


def test_level_replay(o1):
    rng = np.random.default_rng(1)
    base = o1.model
    word = [0]
    while len(word) < 1200:
        word.append(int(rng.choice(base.images[word[-1]])))
    p = TowerPoint(tuple(word), 0)
    levels = []
    for _ in range(1000):
        levels.append(p.level)
        p = tower_step(o1.tower, p)
    # brute-force schedule from successive return times
    sched = []
    for s in word:
        sched += list(range(int(base.return_time[s])))
    assert levels == sched[:1000]


def test_jacobian(o1):
    tw, base = o1.tower, o1.model
    assert tower_jacobian(tw, TowerPoint((2, 0), 0)) == 1.0
    top = tower_jacobian(tw, TowerPoint((2, 0), 2))
    assert top == pytest.approx(base.image_mass[2] / base.element_mass[2])
    prod = np.prod([tower_jacobian(tw, TowerPoint((2, 0), l)) for l in range(3)])
    assert prod == pytest.approx(base.jacobian_of((2, 0)))


def test_separation():
    a = TowerPoint((0, 1, 0, 1, 1, 0), 2)
    assert tower_separation(a, TowerPoint(a.base, 1)) == 0
    assert int(tower_separation(a, TowerPoint(a.base, 2), cap=6)) == 6
    assert tower_separation(a, TowerPoint((0, 1, 0, 1, 1, 1), 2), cap=6) == 5


def test_separation_predicts_addresses(o1):
    rng = np.random.default_rng(2)
    W = o1.model.words(8, first=2)
    for _ in range(50):
        u, v = TowerPoint(tuple(W[rng.integers(len(W))]), 1), TowerPoint(
            tuple(W[rng.integers(len(W))]), 1)
        s = int(tower_separation(u, v, cap=8))
        for _ in range(s):
            assert (u.level, u.base[0]) == (v.level, v.base[0])
            u, v = tower_step(o1.tower, u), tower_step(o1.tower, v)
            if len(u.base) < 2 or len(v.base) < 2:
                break


def test_project_pi_semiconjugacy(o1):
    line = o1.line
    rng = np.random.default_rng(3)
    W = o1.model.words(6)
    res = 0.0
    for _ in range(1000):
        w = tuple(W[rng.integers(len(W))])
        lev = int(rng.integers(0, o1.model.return_time[w[0]]))
        p = TowerPoint(w, lev)
        assert project_pi(o1.tower, TowerPoint(w, 0)) == pytest.approx(line.coordinate(w))
        res = max(res, abs(project_pi(o1.tower, tower_step(o1.tower, p))
                           - line.f(project_pi(o1.tower, p))))
    # F is affine on each symbol, so cylinder midpoints map to midpoints
    assert res < 1e-12


def test_project_pi_needs_map():
    tw = tower_from_levels([1.0, 0.5])
    with pytest.raises(UnsupportedOperation):
        project_pi(tw, TowerPoint(0.3, 0))


# -- tails ------------------------------------------------------------------------


def test_hat_R_tail():
    full = build_tower(SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 1],
                                     element_mass=[0.5, 0.5]))
    assert hat_R_tail(full, 0) == 0.0
    tw = tower_from_levels([1.0, 0.5, 0.25])
    assert hat_R_tail(tw, 0) == pytest.approx(0.75)
    with pytest.raises(OutOfRange):
        hat_R_tail(tw, 5)


def test_hat_R_tail_polynomial_partial_sum():
    ell = np.arange(1, 10_001, dtype=float)
    lm = np.concatenate([[2.0], ell ** -2.0])
    tw = tower_from_levels(lm)
    oracle = float(np.sum(ell[ell > 10] ** -2.0))
    assert hat_R_tail(tw, 10) == pytest.approx(oracle, rel=1e-12)
    np.testing.assert_allclose(hat_R_tail_array(tw)[:20],
                               [hat_R_tail(tw, n) for n in range(20)], rtol=1e-12)


# -- invariant density ----------------------------------------------------------


def test_density_full_shift_uniform():
    m = SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 1], element_mass=[0.5, 0.5])
    nu = invariant_density(build_tower(m), depth=3)
    np.testing.assert_allclose(nu.values, 1.0, atol=1e-12)
    assert nu.upper_bound == pytest.approx(1.0)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_density_is_perron_vector(o1, depth):
    nu = invariant_density(o1.tower, depth=depth)
    ch = nu.chain
    w, V = np.linalg.eig(ch.Q.T)
    k = int(np.argmin(np.abs(w - 1)))
    assert abs(w[k] - 1) < 1e-12
    p = np.real(V[:, k])
    p /= p.sum()
    np.testing.assert_allclose(nu.cell_measure, p, atol=1e-12)
    assert nu.cell_measure.sum() == pytest.approx(1.0, abs=1e-10)
    assert nu.cell_measure[ch.level == 0].sum() > 0
    assert np.all(nu.values > 0) and nu.values.max() <= nu.upper_bound
    assert nu.residual < 1e-12


def test_density_log_regularity(o1):
    nu = invariant_density(o1.tower, depth=4)
    ch = nu.chain
    lh = np.log(nu.values)
    W = ch.words[ch.word_index]
    C = nu.log_regularity_constant
    for a in range(ch.n_cells):
        for b in range(ch.n_cells):
            if (ch.level[a], ch.symbol[a]) != (ch.level[b], ch.symbol[b]) or a == b:
                continue
            s = int(np.argmax(W[a] != W[b]))
            assert abs(lh[a] - lh[b]) <= C * 0.5**s + 1e-12


def test_density_depth_stable(o1):
    lo = invariant_density(o1.tower, depth=2)
    hi = invariant_density(o1.tower, depth=4)
    for lev in range(3):
        assert lo.cell_measure[lo.chain.level == lev].sum() == pytest.approx(
            hi.cell_measure[hi.chain.level == lev].sum(), abs=1e-12)


def test_csv_dumps(o1):
    tw_csv = o1.tower.to_csv().splitlines()
    assert tw_csv[0] == "level,symbol,mass" and len(tw_csv) == 1 + 6
    d_csv = invariant_density(o1.tower, 2).to_csv().splitlines()
    assert d_csv[0] == "level,symbol,address,density"
