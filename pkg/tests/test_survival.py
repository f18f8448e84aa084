import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from jointgp.survival import (
    DPMixture,
    SurvivalRecord,
    SurvParams,
    cumulative_hazard,
    dp_logprior,
    hazard,
    make_lambda_fn,
    stick_to_weights,
    survival_loglik,
)


def const(lam):
    return lambda t: np.full(np.shape(t), lam)


def params(nu, n=1):
    return SurvParams(nu, np.zeros(n), np.zeros(0), 0.0, 0.0)


def test_record_validation():
    with pytest.raises(ValueError):
        SurvivalRecord("a", 0.0, 1)
    with pytest.raises(ValueError):
        SurvivalRecord("a", 1.0, 2)
    with pytest.raises(ValueError):
        SurvivalRecord("a", 1.0, 1, [np.nan])


# -- hazard

def test_hazard_exponential():
    np.testing.assert_array_equal(hazard([0.5, 1.0, 7.0], 1.0, 0.0), 1.0)


def test_hazard_direct():
    assert hazard(3.0, 2.0, 0.0) == 6.0


@pytest.mark.parametrize("nu, lam, t", [(1.5, 0.3, 2.0), (0.7, -1.0, 0.4), (2.0, 0.5, 5.0)])
def test_hazard_is_minus_dlogS(nu, lam, t):
    logS = lambda s: -np.exp(lam) * s**nu
    h = 1e-6
    fd = -(logS(t + h) - logS(t - h)) / (2 * h)
    assert hazard(t, nu, lam) == pytest.approx(fd, rel=1e-6)


def test_hazard_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        hazard(0.0, 1.0, 0.0)


# -- cumulative hazard

@pytest.mark.parametrize("m", [1, 7, 25])
def test_cumhaz_constant_exact(m):
    assert cumulative_hazard(SurvivalRecord("a", 2.0, 1), const(0.0), 1.0, m) == pytest.approx(2.0, abs=1e-14)


def test_cumhaz_weibull_closed_form():
    H = cumulative_hazard(SurvivalRecord("a", 3.0, 1), const(0.7), 1.5, 1000)
    exact = np.exp(0.7) * 3.0**1.5
    assert abs(H - exact) / exact < 2e-3


def test_cumhaz_piecewise_constant():
    lam = lambda t: np.where(np.asarray(t) < 1.0, 0.2, -0.4)
    nu = 1.5
    H = cumulative_hazard(SurvivalRecord("a", 2.0, 1), lam, nu, 1000)
    exact = np.exp(0.2) * 1.0 + np.exp(-0.4) * (2.0**nu - 1.0)
    assert abs(H - exact) / exact < 2e-3


def test_cumhaz_second_order_smooth_integrand():
    lam = lambda t: 0.3 * np.sin(np.asarray(t))
    rec = SurvivalRecord("a", 3.0, 1)
    exact = cumulative_hazard(rec, lam, 1.0, 200000)
    e1 = abs(cumulative_hazard(rec, lam, 1.0, 100) - exact)
    e2 = abs(cumulative_hazard(rec, lam, 1.0, 50) - exact)
    assert 3.0 <= e2 / e1 <= 5.0


@pytest.mark.parametrize("nu", [1.0, 2.0])
def test_cumhaz_exact_for_polynomial_integrands(nu):
    # nu w^(nu-1) is constant or linear: the midpoint rule is exact
    rec = SurvivalRecord("a", 3.0, 1)
    for m in (500, 1000):
        assert cumulative_hazard(rec, const(0.4), nu, m) == pytest.approx(np.exp(0.4) * 3.0**nu, rel=1e-13)


def test_cumhaz_order_three_halves_for_sqrt_integrand():
    # w^(1/2) has an unbounded derivative at 0, so the error falls as m^(-3/2)
    rec = SurvivalRecord("a", 3.0, 1)
    exact = np.exp(0.4) * 3.0**1.5
    e1 = abs(cumulative_hazard(rec, const(0.4), 1.5, 1000) - exact)
    e2 = abs(cumulative_hazard(rec, const(0.4), 1.5, 500) - exact)
    assert e2 / e1 == pytest.approx(2**1.5, rel=0.03)


# -- survival log-likelihood

def test_loglik_event_exponential():
    assert survival_loglik(SurvivalRecord("a", 1.0, 1), params(1.0), const(0.0)) == pytest.approx(-1.0, abs=1e-14)


def test_loglik_censored_exponential():
    assert survival_loglik(SurvivalRecord("a", 2.0, 0), params(1.0), const(0.0)) == pytest.approx(-2.0, abs=1e-14)


def test_loglik_matches_weibull_density():
    nu, lam, y = 1.5, 0.3, 1.7
    logf = np.log(nu) + (nu - 1) * np.log(y) + lam - np.exp(lam) * y**nu
    got = survival_loglik(SurvivalRecord("a", y, 1), params(nu), const(lam), m=1000)
    assert got == pytest.approx(logf, abs=2e-3)


@given(st.floats(0.05, 20), st.floats(0.3, 3), st.floats(-3, 3))
def test_censored_loglik_nonpositive(y, nu, lam):
    assert survival_loglik(SurvivalRecord("a", y, 0), params(nu), const(lam)) <= 0.0


@given(st.floats(0.1, 10), st.floats(0.5, 2.5), st.floats(-2, 2), st.floats(-2, 2), st.booleans())
def test_shift_identity(y, nu, lam, c, ev):
    rec = SurvivalRecord("a", y, int(ev))
    base = survival_loglik(rec, params(nu), const(lam))
    H = cumulative_hazard(rec, const(lam), nu)
    shifted = survival_loglik(rec, params(nu), const(lam + c))
    assert shifted - base == pytest.approx(int(ev) * c - (np.exp(c) - 1.0) * H, abs=1e-9 * max(1.0, H * np.exp(c)))


def test_small_H_event_approaches_log_h():
    rec = SurvivalRecord("a", 1e-6, 1)
    ll = survival_loglik(rec, params(1.0), const(0.0))
    assert ll == pytest.approx(np.log(hazard(1e-6, 1.0, 0.0)), abs=1e-5)


def test_make_lambda_fn():
    p = SurvParams(1.5, np.array([0.2, -0.1]), np.array([0.5]), 0.5, -0.3)
    f = make_lambda_fn(p, 1, [2.0], lambda t: np.tile([4.0, 20.0], (len(t), 1)))
    np.testing.assert_allclose(f(np.array([1.0, 2.0])), -0.1 + 1.0 + 2.0 - 6.0)


# -- stick breaking

def test_sticks_first_takes_all():
    np.testing.assert_allclose(stick_to_weights([1 - 1e-15]), [1.0, 0.0], atol=1e-14)


def test_sticks_remainder():
    np.testing.assert_allclose(stick_to_weights([0.5, 0.5]), [0.5, 0.25, 0.25], rtol=1e-15)


@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=25))
def test_sticks_sum_to_one(v):
    w = stick_to_weights(v)
    assert np.all(w >= 0) and abs(w.sum() - 1.0) < 1e-12


def test_sticks_reject_out_of_range():
    with pytest.raises(ValueError):
        stick_to_weights([0.5, 1.0])


# -- DP prior

def _mix(sticks, locs, alpha=1.5):
    return DPMixture(np.asarray(sticks, float), np.asarray(locs, float), alpha)


def _stick_base(mix):
    from scipy.stats import beta

    return beta(1, mix.alpha).logpdf(mix.sticks).sum() + norm(0, 1).logpdf(mix.locations).sum()


def test_dp_single_component():
    mix = _mix([], [0.4])
    b = np.array([0.1, -1.0])
    expect = norm(0.4, 1).logpdf(b).sum() + norm(0, 1).logpdf(0.4)
    assert dp_logprior(b, mix) == pytest.approx(expect, abs=1e-12)


def test_dp_symmetric_two_components():
    mix = _mix([0.5], [-1.3, 1.3])
    expect = np.log(0.5 * norm(-1.3, 1).pdf(0.0) + 0.5 * norm(1.3, 1).pdf(0.0)) + _stick_base(mix)
    assert dp_logprior([0.0], mix) == pytest.approx(expect, abs=1e-12)


def test_dp_brute_force(rng):
    mix = _mix(rng.uniform(0.05, 0.95, 4), rng.normal(size=5), alpha=2.0)
    b = rng.normal(size=20)
    w = mix.weights
    brute = sum(np.log(sum(w[k] * norm(mix.locations[k], 1).pdf(bi) for k in range(5))) for bi in b)
    assert dp_logprior(b, mix) == pytest.approx(brute + _stick_base(mix), abs=1e-12 * max(1, abs(brute)))


def test_dp_mixture_term_permutation_invariant(rng):
    mix = _mix(rng.uniform(0.1, 0.9, 3), rng.normal(size=4))
    b = rng.normal(size=8)
    perm = rng.permutation(4)
    w = mix.weights[perm]
    loc = mix.locations[perm]
    # rebuild sticks that reproduce the permuted weights
    rem = 1.0 - np.concatenate([[0.0], np.cumsum(w)[:-1]])
    v = w[:-1] / rem[:-1]
    mix2 = _mix(v, loc)
    mix_part = lambda m: dp_logprior(b, m) - _stick_base(m)
    assert mix_part(mix2) == pytest.approx(mix_part(mix), abs=1e-10)
