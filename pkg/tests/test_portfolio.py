import json
import math

import numpy as np
import pytest

from aisroot.core import make_rng
from aisroot.engines import PR_SA, SAA
from aisroot.errors import ConfigurationError, DomainError
from aisroot.portfolio import (
    OptionPosition,
    PortfolioRunConfig,
    PortfolioSetup,
    PortfolioSpec,
    QuadraticFormModel,
    TwistedQuadraticFamily,
    black_scholes,
    build_quadratic_form,
    delta_gamma_error,
    estimate_var_cvar,
    load_portfolio_spec,
    m2_upper_bound,
    psi,
    psi_prime,
    psi_second,
    reference_portfolio,
    sample_twisted,
    saddlepoint_var,
    twist_selector,
    var_truncation_bounds,
)


def _ncdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _npdf(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def textbook_bs(S, K, r, s, T, kind):
    """Reference Black-Scholes evaluator (price, delta, gamma, calendar-time theta)."""
    d1 = (math.log(S / K) + (r + 0.5 * s * s) * T) / (s * math.sqrt(T))
    d2 = d1 - s * math.sqrt(T)
    gamma = _npdf(d1) / (S * s * math.sqrt(T))
    decay = -S * _npdf(d1) * s / (2 * math.sqrt(T))
    if kind == "call":
        return (S * _ncdf(d1) - K * math.exp(-r * T) * _ncdf(d2), _ncdf(d1), gamma,
                decay - r * K * math.exp(-r * T) * _ncdf(d2))
    return (K * math.exp(-r * T) * _ncdf(-d2) - S * _ncdf(-d1), _ncdf(d1) - 1, gamma,
            decay + r * K * math.exp(-r * T) * _ncdf(-d2))


def gaussian_model(b=1.0, a0=0.0):
    return QuadraticFormModel(a0, np.array([b]), np.zeros((1, 1)), np.array([b]), np.array([0.0]), np.eye(1))


def random_model(rng, m=3):
    """Small diagonal model with curvature of both signs (bounded twist domain)."""
    lam = np.concatenate([[rng.uniform(0.1, 0.5), -rng.uniform(0.1, 0.5)], rng.uniform(-0.5, 0.5, m - 2)])
    b = rng.normal(0, 1, m)
    return QuadraticFormModel(float(rng.normal()), b.copy(), np.diag(lam), b, lam, np.eye(m))


@pytest.fixture(scope="module")
def book_model():
    return build_quadratic_form(reference_portfolio())


class TestBlackScholes:
    @pytest.mark.parametrize("kind", ["call", "put"])
    def test_matches_reference(self, kind):
        got = black_scholes(100.0, 100.0, 0.05, 0.3, 0.5, kind)
        np.testing.assert_allclose(got, textbook_bs(100.0, 100.0, 0.05, 0.3, 0.5, kind), rtol=0, atol=1e-10)

    def test_intrinsic_limit(self):
        g = black_scholes(120.0, 100.0, 0.05, 0.3, 1e-10, "call")
        assert g.price == pytest.approx(20.0, abs=1e-6) and g.delta == pytest.approx(1.0, abs=1e-9)

    def test_put_call_parity(self):
        rng = make_rng(1)
        for _ in range(100):
            S, K_, r, s, T = rng.uniform(50, 150), rng.uniform(50, 150), rng.uniform(0, 0.1), rng.uniform(0.05, 0.8), \
                rng.uniform(0.05, 3)
            c = black_scholes(S, K_, r, s, T, "call").price
            p = black_scholes(S, K_, r, s, T, "put").price
            assert c - p == pytest.approx(S - K_ * math.exp(-r * T), abs=1e-12 * max(1.0, S))

    def test_domain(self):
        with pytest.raises(DomainError):
            black_scholes(-1.0, 100.0, 0.05, 0.3, 0.5)


class TestQuadraticForm:
    def test_zero_positions(self):
        spec = PortfolioSpec([100.0, 90.0], [0.3, 0.2], 0.05, 0.04, ())
        m = build_quadratic_form(spec)
        assert m.a0 == 0.0 and np.all(m.b == 0) and np.all(m.lam == 0)

    def test_reconstruction(self, book_model):
        z = make_rng(2).standard_normal((100, book_model.m))
        lhs = book_model.quadratic(z)
        dS = z @ book_model.C.T
        rhs = dS @ book_model.a + np.einsum("ij,jk,ik->i", dS, book_model.A, dS)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8 * np.abs(rhs).max())

    def test_short_book_has_positive_curvature(self, book_model):
        assert np.all(book_model.lam > 0)
        assert np.all(np.diff(book_model.lam) <= 0)

    def test_delta_gamma_close_to_repricing(self):
        mae, sd = delta_gamma_error(reference_portfolio(), n=20_000, seed=3)
        assert mae < 0.05 * sd

    def test_spec_round_trip(self, tmp_path):
        spec = reference_portfolio()
        path = tmp_path / "book.json"
        path.write_text(json.dumps(spec.to_dict()))
        again = load_portfolio_spec(path)
        np.testing.assert_array_equal(again.S0, spec.S0)
        assert again.positions == spec.positions

    def test_bad_spec(self):
        with pytest.raises(ConfigurationError):
            PortfolioSpec([100.0], [0.3], 0.05, 0.04, (OptionPosition(0, "call", 100.0, 0.01, 1.0),))


class TestPsi:
    def test_at_zero(self, book_model):
        assert psi(book_model, 0.0) == 0.0
        assert psi_prime(book_model, 0.0) == pytest.approx(book_model.lam.sum(), rel=1e-14)

    def test_gaussian_value(self):
        assert psi(gaussian_model(), 0.7) == pytest.approx(0.245, rel=1e-14)

    def test_monte_carlo_mgf(self):
        rng = make_rng(5)
        model = random_model(rng)
        lo, hi = model.domain()
        for alpha in (0.3 * lo, 0.2 * hi):
            q = model.quadratic(make_rng(6).standard_normal((1_000_000, model.m)))
            e = np.exp(alpha * q)
            assert abs(e.mean() - math.exp(psi(model, alpha))) <= 4 * e.std(ddof=1) / 1000

    def test_derivatives_match_differences(self):
        model = random_model(make_rng(7))
        for a in (-0.3, 0.0, 0.4):
            h = 1e-5
            assert psi_prime(model, a) == pytest.approx((psi(model, a + h) - psi(model, a - h)) / (2 * h), rel=1e-6)
            assert psi_second(model, a) == pytest.approx(
                (psi_prime(model, a + h) - psi_prime(model, a - h)) / (2 * h), rel=1e-6)

    def test_convex_on_domain(self, book_model):
        lo, hi = book_model.domain()
        lo = max(lo, -1.0)
        grid = np.linspace(lo + 0.005 * (hi - lo), hi - 0.005 * (hi - lo), 400)
        vals = np.array([psi(book_model, a) for a in grid])
        assert np.all(np.diff(vals, 2) >= -1e-9 * np.abs(vals).max())

    def test_outside_domain(self, book_model):
        with pytest.raises(DomainError):
            psi(book_model, book_model.domain()[1] + 1e-3)


class TestTwistSelector:
    def test_untwisted_mean(self, book_model):
        x = book_model.a0 + book_model.lam.sum()
        assert abs(twist_selector(book_model, x)) < 1e-10

    def test_gaussian_linear(self):
        assert twist_selector(gaussian_model(a0=1.0), 3.5) == pytest.approx(2.5, abs=1e-10)

    def test_residual(self, book_model):
        for x in np.linspace(50, 400, 8):
            a = twist_selector(book_model, x)
            y = x - book_model.a0
            assert abs(psi_prime(book_model, a) - y) <= 1e-10 * max(1.0, abs(y))

    def test_grid_search_agreement(self):
        rng = make_rng(8)
        for _ in range(5):
            model = random_model(rng)
            x = model.a0 + model.lam.sum() + rng.uniform(0.5, 3.0)
            lo, hi = model.domain(1e-3)
            grid = np.arange(lo, hi, 1e-4)
            vals = [2 * psi(model, a) - 2 * a * (x - model.a0) for a in grid]
            assert abs(twist_selector(model, x) - grid[int(np.argmin(vals))]) <= 1e-4

    def test_saturation_flag(self):
        model = random_model(make_rng(3))
        a, sat = twist_selector(model, model.a0 + 1e9, with_flag=True)
        lo, hi = model.domain()
        assert sat and model.admissible(a) and a == pytest.approx(hi, rel=1e-5)
        assert not twist_selector(model, model.a0 + model.mean_q + 1.0, with_flag=True)[1]

    def test_minimized_bound_never_exceeds_untwisted(self, book_model):
        for x in np.linspace(0, 400, 9):
            assert m2_upper_bound(book_model, x, twist_selector(book_model, x)) <= m2_upper_bound(book_model, x, 0.0)


class TestTwistedSampling:
    def test_base_measure(self, book_model):
        s = sample_twisted(book_model, 0.0, make_rng(1), 10)
        assert np.all(s.log_lr == 0.0)

    def test_unit_mean_likelihood_ratio(self, book_model):
        # twists the selector uses between the lower Chernoff bound and the 0.999 VaR
        setup = PortfolioSetup(reference_portfolio(), 0.999)
        lo, hi = twist_selector(book_model, setup.bounds[0]), twist_selector(book_model, setup.dg_var)
        rng = make_rng(9)
        for k, alpha in enumerate(rng.uniform(lo, hi, 10)):
            w = np.exp(sample_twisted(book_model, alpha, make_rng(100 + k), 100_000).log_lr)
            assert abs(w.mean() - 1.0) <= 4 * w.std(ddof=1) / math.sqrt(w.size)

    def test_second_moment_bound(self):
        rng = make_rng(10)
        for k in range(10):
            model = random_model(rng)
            x = model.a0 + model.lam.sum() + rng.uniform(0.5, 3.0)
            alpha = twist_selector(model, x) * rng.uniform(0.7, 1.0)
            s = sample_twisted(model, alpha, make_rng(200 + k), 100_000)
            y = (model.a0 + s.Q > x) * np.exp(2 * s.log_lr)
            assert y.mean() <= m2_upper_bound(model, x, alpha) + 4 * y.std(ddof=1) / math.sqrt(y.size)


class TestBounds:
    def test_gaussian_inversion(self):
        assert var_truncation_bounds(gaussian_model(), 0.999)[1] == pytest.approx(
            math.sqrt(-2 * math.log(0.001)), rel=1e-8)

    def test_median_bound(self, book_model):
        q = book_model.quadratic(make_rng(11).standard_normal((200_000, book_model.m)))
        assert var_truncation_bounds(book_model, 0.5)[1] >= book_model.a0 + np.median(q)

    def test_contains_crude_var(self, book_model):
        q = book_model.a0 + book_model.quadratic(make_rng(12).standard_normal((1_000_000, book_model.m)))
        lo, hi = var_truncation_bounds(book_model, 0.999)
        crude = np.quantile(q, 0.999)
        assert lo < crude < hi
        assert saddlepoint_var(book_model, 0.999) == pytest.approx(crude, rel=0.02)


class TestVarCvar:
    def _linear_book(self):
        # a deep in-the-money long-dated call behaves like the underlying
        return PortfolioSpec([100.0], [0.3], 0.05, 0.04, (OptionPosition(0, "call", 1e-3, 5.0, 1.0),))

    def test_median_of_gaussian_loss(self):
        spec = self._linear_book()
        sd = 100 * 0.3 * math.sqrt(0.04)
        est = estimate_var_cvar(spec, SAA, PortfolioRunConfig(p=0.5), 20_000, 3)
        model = build_quadratic_form(spec)
        assert abs(est.var - model.a0) <= 4 * math.sqrt(math.pi / 2) * sd / math.sqrt(20_000)

    @pytest.mark.parametrize("solver", [SAA, PR_SA])
    @pytest.mark.parametrize("mode", ["adaptive", "none"])
    def test_cvar_not_below_var(self, solver, mode):
        setup = PortfolioSetup(reference_portfolio(), 0.999)
        r = estimate_var_cvar(setup, solver, PortfolioRunConfig(p=0.999, is_mode=mode), 4000, 1)
        assert r.cvar >= r.var

    def test_family_output_is_repriced_loss(self):
        spec = reference_portfolio()
        fam = TwistedQuadraticFamily(spec)
        base = fam.draw_base(make_rng(2), 5)
        x = fam.transform(base, 0.0)
        dS = base @ fam.model.C.T
        np.testing.assert_allclose(fam.output(x), spec.losses(dS), rtol=1e-12)
        np.testing.assert_allclose(x[:, 1], fam.model.quadratic(base), rtol=1e-12)

    def test_repricing_identity(self):
        spec = reference_portfolio()
        dS = make_rng(3).standard_normal((3, spec.m))
        ref = [spec.value(spec.S0) - spec.value(spec.S0 + d, elapsed=spec.horizon) for d in dS]
        np.testing.assert_allclose(spec.losses(dS), ref, rtol=1e-12)

    def test_crude_var_agrees_with_reference_quantile(self):
        spec = reference_portfolio()
        setup = PortfolioSetup(spec, 0.99)
        r = estimate_var_cvar(setup, SAA, PortfolioRunConfig(p=0.99, is_mode="none"), 50_000, 4)
        L = spec.losses(make_rng(99).standard_normal((200_000, spec.m)) @ setup.family.model.C.T)
        assert r.var == pytest.approx(np.quantile(L, 0.99), rel=0.03)
