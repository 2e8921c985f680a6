"""Randomized invariants checked with hypothesis."""

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy import optimize

from aisroot.core import Box, PowerFloorTruncation, StepsizeSchedule, SymmetricLogGrowth, make_rng, project_box
from aisroot.engines import QuantileProblem, run_saa_adaptive, weighted_empirical_quantile
from aisroot.errors import LevelUnreachableError
from aisroot.multidim import delta_method_variance
from aisroot.samplers import ExponentialTiltFamily, NormalShiftFamily, ParetoTiltFamily, sample_family

finite = st.floats(-1e6, 1e6, allow_nan=False)
levels = st.floats(0.001, 0.999)


@st.composite
def weighted_samples(draw):
    k = draw(st.integers(1, 8))
    values = draw(st.lists(st.integers(-3, 3), min_size=k, max_size=k))
    # integer weights keep every partial sum exact
    weights = draw(st.lists(st.integers(0, 3), min_size=k, max_size=k))
    return np.array(values, float), np.array(weights, float)


class TestWeightedQuantile:
    @settings(max_examples=1000, deadline=None)
    @given(weighted_samples(), levels)
    def test_matches_brute_force(self, sample, p):
        v, w = sample
        n = v.size
        reachable = [q for q in v if w[v <= q].sum() >= p * n]
        if reachable:
            assert weighted_empirical_quantile(v, w, p) == min(reachable)
        else:
            with pytest.raises(LevelUnreachableError):
                weighted_empirical_quantile(v, w, p)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=30), levels)
    def test_unit_weights_is_empirical_quantile(self, values, p):
        v = np.array(values)
        assert weighted_empirical_quantile(v, np.ones(v.size), p) == np.quantile(v, p, method="inverted_cdf")

    @settings(max_examples=200, deadline=None)
    @given(st.lists(finite, min_size=2, max_size=30), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_monotone_in_level(self, values, p1, p2):
        v = np.array(values)
        lo, hi = sorted((p1, p2))
        assert weighted_empirical_quantile(v, np.ones(v.size), lo) <= weighted_empirical_quantile(v, np.ones(v.size), hi)


@st.composite
def boxes(draw):
    d = draw(st.integers(1, 4))
    a = np.array(draw(st.lists(finite, min_size=d, max_size=d)))
    b = np.array(draw(st.lists(finite, min_size=d, max_size=d)))
    return Box(np.minimum(a, b), np.maximum(a, b))


class TestProjection:
    @settings(max_examples=300, deadline=None)
    @given(boxes(), st.data())
    def test_idempotent_and_inside(self, box, data):
        v = np.array(data.draw(st.lists(finite, min_size=box.dim, max_size=box.dim)))
        once = project_box(v, box)
        assert np.array_equal(project_box(once, box), once)
        assert np.all(box.lo <= once) and np.all(once <= box.hi)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), st.data())
    def test_nonexpansive(self, box, data):
        u = np.array(data.draw(st.lists(finite, min_size=box.dim, max_size=box.dim)))
        v = np.array(data.draw(st.lists(finite, min_size=box.dim, max_size=box.dim)))
        assert np.linalg.norm(project_box(u, box) - project_box(v, box)) <= np.linalg.norm(u - v) * (1 + 1e-12)


class TestSchedules:
    @given(st.floats(1e-3, 1e3), st.floats(0.51, 1.0), st.integers(1, 10**6))
    def test_stepsizes_decrease(self, gamma, exponent, n):
        s = StepsizeSchedule(gamma, exponent)
        assert 0 < s.step(n + 1) < s.step(n)

    @given(st.floats(0.5, 50.0), st.floats(0.01, 0.9), st.lists(st.integers(1, 10**7), min_size=2, max_size=10))
    def test_symmetric_sets_nested(self, scale, eps, ns):
        ns = np.sort(np.array(ns))
        lo, hi = SymmetricLogGrowth(scale, eps).bounds(ns)
        assert np.all(np.diff(lo[:, 0]) <= 0) and np.all(np.diff(hi[:, 0]) >= 0)

    @given(st.floats(0.1, 10.0), st.floats(0.01, 10.0), st.floats(0.01, 0.9),
           st.lists(st.integers(1, 10**7), min_size=2, max_size=10))
    def test_floor_sets_nested(self, upper, c, eps, ns):
        ns = np.sort(np.array(ns))
        lo, hi = PowerFloorTruncation(upper, c, eps).bounds(ns)
        assert np.all(np.diff(lo[:, 0]) <= 0) and np.all(hi == upper) and np.all(lo <= hi)


def _first_order_root(family, q):
    """Minimizer of the exact second moment, from a bracketed root of its log-derivative."""
    lam, h = family.rate, 1e-6

    def dlog(a):
        return (math.log(family.second_moment(q, a + h)) - math.log(family.second_moment(q, a - h))) / (2 * h)

    return optimize.brentq(dlog, 1e-5, 2 * lam - 1e-5, xtol=1e-14, rtol=1e-14)


class TestSelectors:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.2, 5.0), st.floats(0.01, 30.0))
    def test_exponential_minimizes_second_moment(self, lam, x):
        fam = ExponentialTiltFamily(lam)
        q = x / lam
        assert fam.select(q) == pytest.approx(_first_order_root(fam, q), abs=1e-8)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.2, 5.0), st.floats(0.01, 30.0))
    def test_pareto_minimizes_second_moment(self, lam, x):
        fam = ParetoTiltFamily(lam)
        q = math.exp(x / lam)
        assert fam.select(q) == pytest.approx(_first_order_root(fam, q), abs=1e-8)

    @given(st.floats(0.1, 10.0), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_rate_selectors_interior_and_decreasing(self, lam, q1, q2):
        lo, hi = sorted((q1, q2))
        for fam, a, b in ((ExponentialTiltFamily(lam), lo, hi), (ParetoTiltFamily(lam), 1 + lo, 1 + hi)):
            sa, sb = fam.select(a), fam.select(b)
            assert 0 < sb <= sa < lam


class TestDeltaMethod:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4))
    def test_rotation_invariant(self, seed, d):
        rng = make_rng(seed)
        J = rng.standard_normal((d, d)) + 3 * np.eye(d)
        L = rng.standard_normal((d, d))
        S = L @ L.T
        g = rng.standard_normal(d)
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        a = delta_method_variance(J, S, g)
        assert delta_method_variance(Q @ J @ Q.T, Q @ S @ Q.T, Q @ g) == pytest.approx(a, rel=1e-9, abs=1e-12)
        assert a >= 0


class TestUnbiasedWeighting:
    @pytest.mark.parametrize("fam,alpha,q", [(NormalShiftFamily(), 3.0, 3.0), (ExponentialTiltFamily(2.0), 0.4, 3.0),
                                             (ParetoTiltFamily(2.0), 0.6, 20.0)])
    def test_weighted_indicator_mean(self, fam, alpha, q):
        x = sample_family(fam, alpha, make_rng(5), 100_000)
        y = (x >= q) * np.exp(fam.log_likelihood_ratio(x, alpha))
        assert abs(y.mean() - fam.tail(q)) <= 4 * y.std(ddof=1) / math.sqrt(y.size)


class TestTraces:
    @settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(st.integers(0, 2**40), st.sampled_from(["adaptive", "none"]))
    def test_same_seed_same_bytes(self, seed, mode):
        run = lambda: run_saa_adaptive(QuantileProblem(0.99), NormalShiftFamily(), SymmetricLogGrowth(), 300, seed,
                                       is_mode=mode)
        assert run().digest() == run().digest()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**40))
    def test_compiled_and_python_paths_agree(self, seed):
        fam, trunc = ExponentialTiltFamily(2.0), PowerFloorTruncation(2.0)
        a = run_saa_adaptive(QuantileProblem(0.99), fam, trunc, 300, seed)
        b = run_saa_adaptive(QuantileProblem(0.99, h=lambda x: x), fam, trunc, 300, seed)
        np.testing.assert_array_equal(a.iterates, b.iterates)
