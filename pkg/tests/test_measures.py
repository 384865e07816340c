"""Wasserstein machinery tests.

Small-support cases are checked against an exhaustive permutation oracle
(every coupling of uniform equal-size supports is a permutation) with frozen
expected values, the 1D quantile path is checked against the assignment path,
and the entropic path is checked against the exact one.
"""

from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penmfg import measures
from penmfg.errors import PenmfgError
from penmfg.measures import EmpiricalMeasure, MeasureFlow, TimedControlMeasure

RNG = np.random.default_rng(77)


def w2_permutation_oracle(x, y):
    """Exact W2 for uniform equal-size supports by brute force."""
    x = np.atleast_2d(x.T).T if x.ndim == 1 else x
    n = x.shape[0]
    best = min(
        sum(np.sum((x[i] - y[list(p)[i]]) ** 2) for i in range(n))
        for p in permutations(range(n))
    )
    return np.sqrt(best / n)


def em(points, weights=None):
    return EmpiricalMeasure(np.asarray(points, dtype=float), weights)


# ------------------------------------------------------------------ w2 basics


def test_w2_dirac_pair():
    assert measures.w2(em([[0.0]]), em([[1.0]])) == pytest.approx(1.0, abs=1e-14)
    assert measures.w2(em([[0.0, 0.0]]), em([[3.0, 4.0]])) == pytest.approx(5.0)


def test_w2_identity():
    mu = em(RNG.normal(size=(40, 2)))
    assert measures.w2(mu, mu) <= 1e-12


def test_w2_two_point_example_frozen():
    mu, nu = em([0.0, 2.0]), em([1.0, 3.0])
    # identity matching costs (1+1)/2, crossing costs (9+1)/2; frozen optimum 1
    assert w2_permutation_oracle(np.array([[0.0], [2.0]]), np.array([[1.0], [3.0]])) == 1.0
    assert measures.w2(mu, nu) == pytest.approx(1.0, abs=1e-12)


def test_w2_small_supports_match_permutation_oracle():
    for _ in range(25):
        n, d = int(RNG.integers(2, 6)), int(RNG.integers(1, 4))
        x, y = RNG.normal(size=(n, d)), RNG.normal(size=(n, d))
        want = w2_permutation_oracle(x, y)
        got = measures.w2(em(x), em(y), method="assignment")
        assert got == pytest.approx(want, abs=1e-10)


def test_w2_quantile_agrees_with_assignment_1d():
    for n in (3, 17, 100, 200):
        x, y = RNG.normal(size=n), 0.5 + 0.8 * RNG.normal(size=n)
        a = measures.w2(em(x), em(y), method="quantile")
        b = measures.w2(em(x), em(y), method="assignment")
        assert abs(a - b) <= 1e-9


def test_w2_quantile_weighted_vs_lp():
    """Unequal sizes and nonuniform weights, quantile vs transportation LP."""
    for _ in range(5):
        n1, n2 = int(RNG.integers(2, 12)), int(RNG.integers(2, 12))
        x, y = RNG.normal(size=(n1, 1)), RNG.normal(size=(n2, 1))
        w1 = RNG.uniform(0.1, 1.0, n1)
        w2_ = RNG.uniform(0.1, 1.0, n2)
        mu, nu = em(x, w1 / w1.sum()), em(y, w2_ / w2_.sum())
        a = measures.w2(mu, nu, method="quantile")
        b = measures.w2(mu, nu, method="lp")
        assert abs(a - b) <= 1e-8


def test_w2_metric_axioms():
    pool = [em(RNG.normal(size=(int(RNG.integers(2, 9)), 2))) for _ in range(8)]
    for mu in pool:
        assert measures.w2(mu, mu) <= 1e-12
    for mu in pool:
        for nu in pool:
            assert abs(measures.w2(mu, nu) - measures.w2(nu, mu)) <= 1e-9
    for a in pool[:4]:
        for b in pool[:4]:
            for c in pool[:4]:
                ab, bc, ac = measures.w2(a, b), measures.w2(b, c), measures.w2(a, c)
                assert ac <= ab + bc + 1e-9


def test_w2_scaling():
    x, y = RNG.normal(size=(30, 2)), RNG.normal(size=(30, 2))
    base = measures.w2(em(x), em(y))
    for s in (0.5, 2.0, -3.0):
        assert measures.w2(em(s * x), em(s * y)) == pytest.approx(abs(s) * base, rel=1e-9)


def test_w2_entropic_close_to_exact():
    for d, n in ((2, 120), (3, 80)):
        x = RNG.normal(size=(n, d))
        y = RNG.normal(size=(n, d)) + 0.7
        exact = measures.w2(em(x), em(y), method="assignment")
        approx, info = measures.w2(em(x), em(y), method="entropic", return_info=True)
        assert info["method"] == "entropic" and info["debiased"]
        assert info["sweeps"] <= measures.SINKHORN_MAX_SWEEPS * 3
        assert abs(approx - exact) <= 0.02 * exact


def test_w2_auto_dispatch():
    big = em(RNG.normal(size=(300, 2)))
    other = em(RNG.normal(size=(300, 2)))
    _, info = measures.w2(big, other, return_info=True)
    assert info["method"] == "entropic"
    _, info = measures.w2(em(RNG.normal(size=(50, 2))), em(RNG.normal(size=(50, 2))),
                          return_info=True)
    assert info["method"] == "assignment"


def test_w2_dimension_mismatch():
    with pytest.raises(PenmfgError):
        measures.w2(em([[0.0]]), em([[0.0, 1.0]]))


# ------------------------------------------------------------------ measures


def test_empirical_measure_validation():
    with pytest.raises(PenmfgError):
        em([[np.inf]])
    with pytest.raises(PenmfgError):
        em([[0.0], [1.0]], weights=[0.7, 0.7])
    with pytest.raises(PenmfgError):
        em([[0.0], [1.0]], weights=[-0.1, 1.1])
    mu = em([[1.0, 2.0], [3.0, 4.0]], weights=[0.25, 0.75])
    np.testing.assert_allclose(mu.mean, [2.5, 3.5])
    assert mu.second_moment == pytest.approx(0.25 * 5 + 0.75 * 25)


def test_flow_validation_and_w2_flow():
    t = np.linspace(0.0, 1.0, 5)
    states = RNG.normal(size=(5, 20, 1))
    a = measures.flow_from_states(t, states)
    b = measures.flow_from_states(t, states + 0.1 * RNG.normal(size=states.shape))
    top, profile = measures.w2_flow(a, b, return_profile=True)
    per_node = [measures.w2(fa, fb) for fa, fb in zip(a.frames, b.frames)]
    np.testing.assert_allclose(profile, per_node)
    assert top == pytest.approx(max(per_node))
    assert measures.w2_flow(a, a) <= 1e-12


def test_w2_flow_end_node_only():
    t = np.linspace(0.0, 1.0, 4)
    states = np.zeros((4, 10, 1))
    shifted = states.copy()
    shifted[-1] += 1.0
    a = measures.flow_from_states(t, states)
    b = measures.flow_from_states(t, shifted)
    assert measures.w2_flow(a, b) == pytest.approx(1.0, abs=1e-12)


def test_flow_grid_mismatch():
    a = measures.flow_from_states(np.linspace(0, 1, 3), np.zeros((3, 4, 1)))
    b = measures.flow_from_states(np.linspace(0, 2, 3), np.zeros((3, 4, 1)))
    with pytest.raises(PenmfgError):
        measures.w2_flow(a, b)
    with pytest.raises(PenmfgError):
        MeasureFlow(np.array([0.0, 0.5, 0.6]), [em([[0.0]])] * 3)


# ---------------------------------------------------------- control measures


def tcm_constant(atoms, weights, cells=10, horizon=1.0):
    t = np.linspace(0.0, horizon, cells + 1)
    w = np.tile(np.asarray(weights, dtype=float), (cells, 1))
    return TimedControlMeasure(t, np.asarray(atoms, dtype=float), w)


def test_d_relaxed_identity_and_dirac_shift():
    q1 = tcm_constant([0.0], [1.0])
    q2 = tcm_constant([0.75], [1.0])
    assert measures.d_relaxed(q1, q1) <= 1e-12
    assert measures.d_relaxed(q1, q2) == pytest.approx(0.75, abs=1e-9)


def test_d_relaxed_mixture_vs_middle():
    # mass 1/2 at -1 and +1 each cell moves distance 1 to reach 0
    q_mix = tcm_constant([-1.0, 1.0], [0.5, 0.5])
    q_mid = tcm_constant([-1.0, 0.0, 1.0], [0.0, 1.0, 0.0])
    assert measures.d_relaxed(q_mix, q_mid) == pytest.approx(1.0, abs=1e-9)


def test_d_relaxed_horizon_mismatch():
    with pytest.raises(PenmfgError):
        measures.d_relaxed(tcm_constant([0.0], [1.0], horizon=1.0),
                           tcm_constant([0.0], [1.0], horizon=2.0))


def test_timed_control_measure_validation():
    t = np.linspace(0, 1, 4)
    with pytest.raises(PenmfgError):
        TimedControlMeasure(t, [0.0, 1.0], np.full((3, 2), 0.4))
    with pytest.raises(PenmfgError):
        TimedControlMeasure(t, [0.0, 1.0], -np.ones((3, 2)) * 0.5)
    q = TimedControlMeasure(t, [0.0, 1.0], np.full((3, 2), 0.5))
    pts, mass = q.support()
    assert pts.shape == (6, 2) and mass.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------- hypothesis


@settings(max_examples=50, deadline=None)
@given(
    xs=st.lists(st.floats(-20.0, 20.0), min_size=2, max_size=8),
    ys=st.lists(st.floats(-20.0, 20.0), min_size=2, max_size=8),
)
def test_w2_1d_hypothesis(xs, ys):
    mu, nu = em(np.array(xs)), em(np.array(ys))
    d12 = measures.w2(mu, nu)
    assert d12 >= 0.0
    assert abs(d12 - measures.w2(nu, mu)) <= 1e-9
    # distance dominated by the farthest-pair bound
    assert d12 <= max(abs(max(xs) - min(ys)), abs(max(ys) - min(xs))) + 1e-9
