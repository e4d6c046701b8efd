import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import c_index_loop, c_td_loop
from survkit.errors import DataError
from survkit.hazard import StepFunction, breslow, kaplan_meier, survival_curves
from survkit.metrics import (
    MetricReport,
    brier_curve,
    brier_score_at,
    c_index,
    c_td_index,
    censoring_distribution,
    comparable_pairs,
    integrated_brier,
    paired_t_test,
)


def random_instance(rng, n=None):
    n = n or int(rng.integers(2, 51))
    T = rng.integers(1, 8, size=n).astype(float)  # many ties
    D = rng.random(n) < 0.6
    # guarantee one comparable pair: an event strictly before someone else
    D[0] = True
    T[0] = T.min()
    if T.max() == T[0]:
        T[1] = T[0] + 1
    return T, D


def random_curve(rng):
    k = int(rng.integers(0, 6))
    times = np.unique(rng.integers(0, 9, size=k).astype(float))
    values = np.sort(rng.choice([0.1, 0.3, 0.5, 0.7], size=times.size))[::-1]
    return StepFunction(times, values, 1.0)


def as_tuple(c):
    return c.times, c.values, c.value_before_first


def test_comparable_pairs_examples():
    assert comparable_pairs([1, 2], [1, 0]) == [(0, 1)]
    assert comparable_pairs([1, 2], [0, 1]) == []
    assert comparable_pairs([3, 3], [1, 1]) == []


def test_c_index_examples():
    T = np.arange(1.0, 6.0)
    D = np.ones(5, dtype=bool)
    assert c_index(-T, T, D) == 1.0
    assert c_index(np.zeros(5), T, D) == 0.5
    with pytest.raises(DataError):
        c_index([1, 2], [1, 2], [0, 0])


def test_concordance_matches_brute_force_on_100_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        T, D = random_instance(rng)
        n = T.size
        r = rng.integers(0, 4, size=n).astype(float)  # risk ties
        curves = [random_curve(rng) for _ in range(n)]
        assert c_index(r, T, D) == c_index_loop(r, T, D)
        assert c_td_index(curves, T, D) == c_td_loop([as_tuple(c) for c in curves], T, D)


def test_c_td_shared_grid_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        T, D = random_instance(rng, n=10)
        base = breslow(np.zeros(10), T, D)
        curves = survival_curves(base, np.round(rng.normal(size=10), 1))
        assert c_td_index(curves, T, D) == c_td_loop([as_tuple(c) for c in curves], T, D)


def test_identical_curves_score_half():
    T = np.array([1.0, 2.0, 3.0, 4.0])
    D = np.ones(4, dtype=bool)
    c = StepFunction([1.0, 3.0], [0.6, 0.2], 1.0)
    assert c_td_index([c] * 4, T, D) == 0.5


def test_own_time_variant():
    # S_0 read at its own time 1 (0.8) against S_1 at its own time 2 (0.3)
    curves = [StepFunction([1.0, 2.0], [0.8, 0.7], 1.0), StepFunction([1.0, 2.0], [0.9, 0.3], 1.0)]
    T, D = [1.0, 2.0], [1, 1]
    assert c_td_index(curves, T, D) == 1.0
    assert c_td_index(curves, T, D, evaluate_at="own") == 0.0


def test_proportional_hazards_ctd_equals_c_index():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        T = rng.exponential(size=n)
        D = rng.random(n) < 0.7
        D[np.argmin(T)] = True
        g = rng.normal(size=n)
        base = breslow(g, T, D)
        test_g = rng.normal(size=n)
        assert c_td_index(survival_curves(base, test_g), T, D) == c_index(test_g, T, D)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_monotone_invariance_and_flip(seed):
    rng = np.random.default_rng(seed)
    n = 25
    T = rng.permutation(n).astype(float) + 1  # tie-free
    D = rng.random(n) < 0.6
    D[np.argmin(T)] = True
    r = rng.normal(size=n)
    c = c_index(r, T, D)
    assert c_index(np.exp(r), T, D) == c
    assert c_index(3 * r - 2, T, D) == c
    assert c_index(-r, T, D) == pytest.approx(1 - c, abs=1e-15)
    curves = [StepFunction(np.sort(rng.choice(30, 4, replace=False)).astype(float),
                           np.sort(rng.random(4))[::-1], 1.0) for _ in range(n)]
    ct = c_td_index(curves, T, D)
    assert 0 <= ct <= 1
    assert c_td_index([s.map(lambda v: 0.5 * v + 0.1) for s in curves], T, D) == ct
    assert c_td_index([s.map(np.exp) for s in curves], T, D) == ct
    raw = [[s(T[i]) for s in curves] for i in range(n)]
    ties = sum(raw[i][i] == raw[i][j] for i, j in comparable_pairs(T, D))
    if ties == 0:
        flipped = c_td_index([s.map(lambda v: 1 - v) for s in curves], T, D)
        assert flipped == pytest.approx(1 - ct, abs=1e-15)


# 12-subject IPCW fixture, expanded term by term with exact fractions.
# Censoring KM on this cohort (censored at 2, 4, 5, 7, 9, 10):
#   G = 1 on [0,2), 10/11 on [2,4), 35/44 on [4,5), 15/22 on [5,7), ...
FIX_T = [1, 2, 2, 3, 4, 5, 5, 6, 7, 8, 9, 10]
FIX_D = [1, 0, 1, 1, 0, 1, 0, 1, 0, 1, 0, 0]
FIX_S5 = ["0.1", "0.9", "0.2", "0.3", "0.8", "0.25", "0.6", "0.7", "0.5", "0.75", "0.9", "0.95"]


def fixture_curves():
    # steps at 3 and 6; the value on [3, 6) is the one read at t = 5
    return [StepFunction([3.0, 6.0], [float(s), float(s) / 2], 1.0) for s in FIX_S5]


def test_fixture_censoring_distribution():
    G = censoring_distribution(FIX_T, FIX_D)
    assert G(1.9) == 1.0
    assert G(2) == pytest.approx(10 / 11, rel=1e-15)
    assert G(4) == pytest.approx(35 / 44, rel=1e-15)
    assert G(5) == pytest.approx(15 / 22, rel=1e-15)
    assert G(7) == pytest.approx(45 / 88, rel=1e-15)
    assert G(10) == 0.0


def test_brier_twelve_subject_fixture():
    S = [F(s) for s in FIX_S5]
    # events with T_i <= 5: subjects 0 (T=1), 2 (T=2), 3 (T=3), 5 (T=5), weight 1/G(T_i-)
    event_terms = (S[0] ** 2 / 1 + S[2] ** 2 / 1 + S[3] ** 2 / F(10, 11) + S[5] ** 2 / F(35, 44))
    # still at risk (T_i > 5): subjects 7..11, weight 1/G(5)
    alive_terms = sum((1 - S[k]) ** 2 for k in range(7, 12)) / F(15, 22)
    # censored before 5 (subjects 1, 4, 6) contribute nothing
    expected = (event_terms + alive_terms) / 12
    G = censoring_distribution(FIX_T, FIX_D)
    got = brier_score_at(fixture_curves(), FIX_T, FIX_D, G, 5.0)
    assert abs(got - float(expected)) < 1e-12


def test_brier_fixture_without_left_limit():
    S = [F(s) for s in FIX_S5]
    event_terms = (S[0] ** 2 + S[2] ** 2 / F(10, 11) + S[3] ** 2 / F(10, 11)
                   + S[5] ** 2 / F(15, 22))
    alive_terms = sum((1 - S[k]) ** 2 for k in range(7, 12)) / F(15, 22)
    expected = (event_terms + alive_terms) / 12
    G = censoring_distribution(FIX_T, FIX_D)
    got = brier_score_at(fixture_curves(), FIX_T, FIX_D, G, 5.0, left_limit=False)
    assert abs(got - float(expected)) < 1e-12


def test_brier_excludes_zero_weight_terms():
    G = StepFunction([3.0], [0.0], 1.0)
    curves = [StepFunction([], [], 0.5)] * 4
    res = brier_score_at(curves, [1, 2, 6, 7], [1, 1, 0, 0], G, 5.0, return_excluded=True)
    assert res.excluded == 2
    assert res.score == pytest.approx(2 * 0.25 / 4)  # still divided by N = 4


def test_brier_perfect_and_half():
    T = np.array([1.0, 2.0, 6.0, 8.0])
    D = np.ones(4, dtype=bool)
    G = censoring_distribution(T, D)
    perfect = [StepFunction([], [], 1.0 if t > 5 else 0.0) for t in T]
    assert brier_score_at(perfect, T, D, G, 5.0) == 0.0
    half = [StepFunction([], [], 0.5)] * 4
    assert brier_score_at(half, T, D, G, 5.0) == 0.25


def test_brier_without_censoring_is_mse():
    rng = np.random.default_rng(3)
    T = rng.exponential(size=40)
    D = np.ones(40, dtype=bool)
    G = censoring_distribution(T, D)
    curves = survival_curves(breslow(rng.normal(size=40), T, D), rng.normal(size=40))
    for t in (0.1, 0.5, 1.0, 3.0):
        pred = np.array([c(t) for c in curves])
        assert brier_score_at(curves, T, D, G, t) == pytest.approx(np.mean(((T > t) - pred) ** 2),
                                                                   rel=1e-12)


def _instance(seed=0, n=30):
    rng = np.random.default_rng(seed)
    T = np.round(rng.exponential(3.0, size=n), 2)
    D = rng.random(n) < 0.6
    D[np.argmin(T)] = True
    curves = survival_curves(breslow(rng.normal(size=n), T, D), rng.normal(size=n))
    return curves, T, D, kaplan_meier(T, D, target="censoring")


def test_ibs_constant_integrand():
    T = np.array([1.0, 3.0, 5.0, 12.0])
    D = np.ones(4, dtype=bool)
    G = censoring_distribution(T, D)
    half = [StepFunction([], [], 0.5)] * 4
    assert integrated_brier(half, T, D, G, 0.0, 10.0) == pytest.approx(0.25, rel=1e-15)


def test_ibs_short_interval_limit():
    curves, T, D, G = _instance(1)
    t1 = float(np.sort(T)[3]) + 0.005
    ibs = integrated_brier(curves, T, D, G, t1, t1 + 1e-6)
    assert ibs == pytest.approx(brier_score_at(curves, T, D, G, t1), abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ibs_matches_dense_grid(seed):
    curves, T, D, G = _instance(seed)
    t1, t2 = float(T[D].min()), 8.0
    grid = np.linspace(t1, t2, 10_000, endpoint=False)
    dense = float(np.mean(brier_curve(curves, T, D, G, grid)))
    assert abs(integrated_brier(curves, T, D, G, t1, t2) - dense) < 1e-3


def test_ibs_details_and_trapezoid():
    curves, T, D, G = _instance(4)
    res = integrated_brier(curves, T, D, G, 0.5, 6.0, return_details=True)
    assert res.refinement_error < 1e-12  # step integration is exact on the jump grid
    assert abs(res.trapezoid - res.value) < 0.05
    trap = integrated_brier(curves, T, D, G, 0.5, 6.0, method="trapezoid")
    assert trap == res.trapezoid
    with pytest.raises(ValueError):
        integrated_brier(curves, T, D, G, 2.0, 2.0)


def test_t_test_identical_vectors():
    a = [0.8, 0.7, 0.9]
    assert paired_t_test(a, a) == (0.0, 1.0, False)


def test_t_test_constant_difference_is_degenerate():
    res = paired_t_test([2, 3, 4, 5], [1, 2, 3, 4])
    assert res.degenerate and res.t_stat == math.inf and math.isnan(res.p)


def test_t_test_textbook_fixture():
    d = np.array([0.5, 0.7, 0.3, 0.5, 0.5])
    b = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    res = paired_t_test(b + d, b)
    # mean 0.5, sample sd sqrt(0.08 / 4), so t = 0.5 / (sqrt(0.02) / sqrt(5))
    t = 0.5 / (math.sqrt(0.02) / math.sqrt(5))
    assert res.t_stat == pytest.approx(t, rel=1e-12)
    assert t == pytest.approx(7.905694150420948, rel=1e-12)
    # closed-form Student t with 4 degrees of freedom
    p = 1 - t * (t * t + 6) / (t * t + 4) ** 1.5
    assert res.p == pytest.approx(p, rel=1e-9)
    ref = stats.ttest_rel(b + d, b)
    assert res.p == pytest.approx(ref.pvalue, rel=1e-9)


def test_metric_report():
    r = MetricReport("ctd", [0.7, 0.8, 0.9])
    assert r.mean == pytest.approx(0.8)
    assert r.std == pytest.approx(0.1)
    assert r.to_csv().splitlines() == ["split,value", "0,0.7", "1,0.8", "2,0.9"]
    one = MetricReport("ibs", [0.2])
    assert math.isnan(one.std) and not one.std_defined
    assert '"std": null' in one.to_json()
