import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wgmlab.errors import InsufficientResolution, ModelError, UnsupportedOperation
from wgmlab.models import DoublingMap, IntermittentMap
from wgmlab.symbolic import (AtLeast, SymbolicModel, check_aperiodicity, check_coprime_block,
                             check_expansion, check_gibbs, separation_time)

from conftest import random_model


def brute_separation(x, y, cap):
    for k in range(cap):
        if x[k] != y[k]:
            return k
    return cap


# -- separation time -----------------------------------------------------------


def test_separation_examples():
    assert separation_time([0, 1, 2, 0], [0, 1, 3, 0]) == 2
    s = separation_time([0, 1] * 40, [0, 1] * 40, cap=64)
    assert isinstance(s, AtLeast) and int(s) == 64 and str(s) == "≥64"


def test_separation_short_itinerary():
    with pytest.raises(InsufficientResolution):
        separation_time([0, 1], [0, 1], cap=5)


def test_separation_matches_scan_on_oracle(o1):
    rng = np.random.default_rng(0)
    W = o1.model.words(6)
    for _ in range(200):
        a, b = W[rng.integers(len(W))], W[rng.integers(len(W))]
        assert int(separation_time(a, b, cap=6)) == brute_separation(a, b, 6)


words = st.lists(st.integers(0, 2), min_size=12, max_size=12)


@given(words, words, words)
def test_separation_symmetric_and_ultrametric(x, y, z):
    sxy, syx = int(separation_time(x, y, 12)), int(separation_time(y, x, 12))
    assert sxy == syx
    assert int(separation_time(x, z, 12)) >= min(sxy, int(separation_time(y, z, 12)))


# -- model invariants ------------------------------------------------------------------


@pytest.mark.parametrize("kw,msg", [
    (dict(images=[[0], []], return_time=[1, 1], element_mass=[1, 1]), "empty"),
    (dict(images=[[0, 1], [0]], return_time=[1, 0], element_mass=[1, 1]), "return"),
    (dict(images=[[0, 1], [0]], return_time=[1, 1], element_mass=[1, -1]), "masses"),
    (dict(images=[[0, 1], [0]], return_time=[1, 1], element_mass=[1, 1], beta=1.0), "beta"),
    (dict(images=[[0, 1], [0]], return_time=[1, 1], element_mass=[1, 1], delta0=1.5), "long"),
])
def test_model_rejects_invalid(kw, msg):
    with pytest.raises(ModelError, match=msg):
        SymbolicModel(**kw)


def test_default_jacobian_is_consistent(o1):
    # nonsingularity: sum of depth-2 cylinder masses recovers each element
    assert o1.model.check_consistency() < 1e-12


# -- Gibbs ---------------------------------------------------------------------------


def test_gibbs_constant_jacobian():
    m = SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 2], element_mass=[0.5, 0.5])
    rep = check_gibbs(m, 3)
    assert rep.passes and rep.tightest_constant == 0.0


def _depth2_model(scale=1.0):
    mass = {(0, 0): 0.2, (0, 1): 0.3, (1, 0): 0.1, (1, 1): 0.4}
    el = np.array([0.5, 0.5])

    def jac(w):
        # J on [i j] = m([j]) / m([i j]), optionally corrupted on one cylinder
        j = el[w[1]] / mass[w]
        return j * (scale if w == (1, 1) else 1.0)

    return SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 2], element_mass=el,
                         jacobian=jac, jacobian_depth=2), jac


def test_gibbs_matches_exhaustive_pairs():
    model, jac = _depth2_model()
    rep = check_gibbs(model, 2)
    # oracle: for pairs in a common element, s(Fx, Fy) = 0 at depth 2
    worst = 0.0
    for i in range(2):
        vals = [math.log(jac((i, j))) for j in range(2)]
        worst = max(worst, max(vals) - min(vals))
    assert rep.tightest_constant == pytest.approx(worst / model.beta**0, rel=1e-12)


def test_gibbs_planted_fault():
    model, _ = _depth2_model(scale=math.e**10)
    rep = check_gibbs(model, 2)
    # a finite constant still "passes"; the planted cylinder breaks the declared C_F
    assert rep.violations and rep.tightest_constant > model.gibbs_constant
    assert {rep.violations[0][0], rep.violations[0][1]} == {(1, 1), (1, 0)}


def test_gibbs_depth_monotone(o1):
    deep = check_gibbs(o1.model, 4)
    for d in (2, 3):
        assert check_gibbs(o1.model, d).tightest_constant <= deep.tightest_constant + 1e-12


# -- aperiodicity ------------------------------------------------------------------


def test_aperiodicity_examples():
    full = SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 1], element_mass=[1, 1])
    assert check_aperiodicity(full).k0 == 1
    golden = SymbolicModel(images=[[0, 1], [0]], return_time=[1, 2], element_mass=[1, 1])
    assert check_aperiodicity(golden).k0 == 2
    cyc = SymbolicModel(images=[[1], [0]], return_time=[1, 1], element_mass=[1, 1])
    assert not check_aperiodicity(cyc).ok


def test_aperiodicity_horizon_warning():
    m = SymbolicModel(images=[[0, 1, 2], [0], [1]], return_time=[1, 1, 1],
                      element_mass=[1, 1, 1])
    with pytest.warns(UserWarning):
        check_aperiodicity(m, horizon=2)


def _paths_exist(model, i, j, n):
    reach = {i}
    for _ in range(n):
        reach = {b for a in reach for b in model.images[a]}
    return j in reach


@given(st.integers(0, 10_000))
def test_aperiodicity_matches_path_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    images = [sorted(set(rng.choice(n, rng.integers(1, n + 1), replace=False).tolist()))
              for _ in range(n)]
    model = SymbolicModel(images=images, return_time=[1] * n, element_mass=[1.0] * n,
                          delta0=1.0)
    rep = check_aperiodicity(model, horizon=20)
    if rep.ok:
        for n_ in range(rep.k0, 21):
            assert all(_paths_exist(model, i, j, n_) for i in range(n) for j in range(n))
    else:
        assert not all(_paths_exist(model, i, j, 20) for i in range(n) for j in range(n))


# -- coprime block ------------------------------------------------------------------


def test_coprime_examples(o1):
    full = SymbolicModel(images=[[0, 1], [0, 1]], return_time=[1, 2], element_mass=[1, 1])
    assert check_coprime_block(full).block == (0, 1)
    assert check_coprime_block(o1.model).block == (0, 1)
    even = SymbolicModel(images=[[0, 1], [0, 1]], return_time=[2, 4], element_mass=[1, 1])
    assert not check_coprime_block(even).ok


def _brute_block(model):
    n = model.alphabet_size
    for N in range(2, n + 1):
        for blk in itertools.combinations(range(n), N):
            R = [int(model.return_time[i]) for i in blk]
            if math.gcd(*R) == 1 and all(set(blk) <= set(model.images[i]) for i in blk):
                return blk
    return None


@given(st.integers(0, 10_000))
def test_coprime_block_matches_subset_search(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    images = [sorted(set(rng.choice(n, rng.integers(1, n + 1), replace=False).tolist()))
              for _ in range(n)]
    R = rng.integers(1, 7, n)
    model = SymbolicModel(images=images, return_time=R, element_mass=[1.0] * n, delta0=1.0)
    rep = check_coprime_block(model)
    assert (tuple(rep.block) if rep.block else None) == _brute_block(model)


# -- expansion --------------------------------------------------------------------


def test_expansion_doubling():
    rep = check_expansion(DoublingMap(), samples=1000, seed=0)
    # |Fx - Fy| = 2|x - y| <= 2 beta^s with s counted from 0, so C = 2 is sharp
    assert rep.passes and 1.9 < rep.tightest_constant <= 2.0 + 1e-9


def test_expansion_intermittent():
    rep = check_expansion(IntermittentMap(0.5), samples=1000, seed=0)
    assert rep.violations == 0


class _Contracting(DoublingMap):
    def induced(self, x):
        x = np.asarray(x, float)
        return np.where(x < 0.5, 0.5 * x, np.mod(2 * x, 1.0)), np.ones(x.shape, np.int64)

    def f(self, x):
        return self.induced(x)[0]


def test_expansion_planted_fault():
    rep = check_expansion(_Contracting(), samples=1000, seed=0)
    assert not rep.passes and rep.violations > 0


def test_expansion_needs_metric(o1):
    with pytest.raises(UnsupportedOperation):
        check_expansion(o1.model)
