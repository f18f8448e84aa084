import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from jointgp.linalg_kron import NoiseSpec, build_R, cross_cov_dense, se_kernel, temporal_kernel
from jointgp.longitudinal import (
    SubjectLongitudinal,
    SubjectLongParams,
    marginal_loglik,
    predict_biomarkers,
    predict_trajectory,
)


def make_subject(r, l, p_obs=1.0, sid="s"):
    t = np.sort(r.uniform(0, 15, l))
    while np.any(np.diff(t) <= 1e-6):
        t = np.sort(r.uniform(0, 15, l))
    m1 = r.random(l) < p_obs
    m2 = r.random(l) < p_obs
    if not (m1.any() or m2.any()):
        m1[0] = True
    return SubjectLongitudinal(sid, t, r.normal(5, 1, l), r.normal(20, 2, l), m1, m2)


def brute_loglik(s, p, R, rho2, noise):
    C = cross_cov_dense(R, p.kappa2 * se_kernel(s.times, s.times, rho2), noise)
    mean = np.repeat(p.intercepts, s.n_times)
    m = s.mask
    return multivariate_normal(mean[m], C[np.ix_(m, m)]).logpdf(s.values[m])


def brute_predict(s, p, R, rho2, noise, t_star):
    Rm = R.R if hasattr(R, "R") else R
    m = s.mask
    C = cross_cov_dense(Rm, p.kappa2 * se_kernel(s.times, s.times, rho2), noise)[np.ix_(m, m)]
    k = np.kron(Rm, p.kappa2 * se_kernel([t_star], s.times, rho2))[:, m]
    resid = s.values[m] - np.repeat(p.intercepts, s.n_times)[m]
    mean = p.intercepts + k @ np.linalg.solve(C, resid)
    cov = p.kappa2 * Rm - k @ np.linalg.solve(C, k.T)
    return mean, cov


# -- construction

def test_subject_validation():
    with pytest.raises(ValueError):
        SubjectLongitudinal("a", [1.0, 0.5], [1, 1], [1, 1], [True, True], [True, True])
    with pytest.raises(ValueError):
        SubjectLongitudinal("a", [0.0], [1.0], [1.0], [False], [False])
    with pytest.raises(ValueError):
        SubjectLongitudinal("a", [0.0], [np.nan], [1.0], [True], [False])
    # unobserved entries may hold anything
    SubjectLongitudinal("a", [0.0], [np.nan], [1.0], [False], [True])


def test_params_validation():
    with pytest.raises(ValueError):
        SubjectLongParams(0.0, 0.0, 0.0)


# -- marginal_loglik

def test_degenerate_l1_independent_normals():
    s = SubjectLongitudinal("a", [2.0], [5.3], [19.1], [True], [True])
    p = SubjectLongParams(5.0, 20.0, 1e-300)
    ll = marginal_loglik(s, p, build_R(1.0, 0.0), temporal_kernel([2.0], 0.1), NoiseSpec(0.3, 0.6))
    expect = norm(5.0, np.sqrt(0.3)).logpdf(5.3) + norm(20.0, np.sqrt(0.6)).logpdf(19.1)
    assert ll == pytest.approx(expect, abs=1e-12)


def test_fast_path_matches_dense(rng):
    s = make_subject(rng, 5)
    p = SubjectLongParams(5.2, 19.0, 0.8)
    R = build_R(1.5, 0.6)
    noise = NoiseSpec(0.3, 0.5)
    ll = marginal_loglik(s, p, R, temporal_kernel(s.times, 0.1), noise)
    assert ll == pytest.approx(brute_loglik(s, p, R, 0.1, noise), abs=1e-8)


def test_masked_matches_brute_force(rng):
    s = make_subject(rng, 12, p_obs=0.7)
    assert not s.fully_observed
    p = SubjectLongParams(4.8, 21.0, 1.3)
    R = build_R(0.9, -0.4)
    noise = NoiseSpec(0.2, 0.4)
    ll = marginal_loglik(s, p, R, temporal_kernel(s.times, 0.1), noise)
    assert abs(ll - brute_loglik(s, p, R, 0.1, noise)) < 1e-10


def test_kernel_mismatch_rejected(rng):
    s = make_subject(rng, 4)
    with pytest.raises(ValueError):
        marginal_loglik(s, SubjectLongParams(5, 20, 1), build_R(1, 0), temporal_kernel(s.times + 1, 0.1), NoiseSpec(1, 1))


@given(st.integers(0, 2**32 - 1), st.floats(-0.9, 0.9), st.floats(0.2, 3.0))
def test_label_swap_invariance(seed, corr, tau2):
    r = np.random.default_rng(seed)
    s = make_subject(r, 6, p_obs=0.8)
    p = SubjectLongParams(5.0, 20.0, 0.7)
    R = build_R(tau2, corr).R
    noise = (0.3, 0.7)
    swap = SubjectLongitudinal("b", s.times, s.values2, s.values1, s.mask2, s.mask1)
    Rs = R[::-1, ::-1]
    k = temporal_kernel(s.times, 0.1)
    a = marginal_loglik(s, p, R, k, NoiseSpec(*noise))
    b = marginal_loglik(swap, SubjectLongParams(20.0, 5.0, 0.7), Rs, k, NoiseSpec(*noise[::-1]))
    assert a == pytest.approx(b, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_unobserved_time_leaves_loglik_unchanged(seed):
    r = np.random.default_rng(seed)
    s = make_subject(r, 5, p_obs=0.8)
    p = SubjectLongParams(5.0, 20.0, 0.9)
    R = build_R(1.2, 0.5)
    noise = NoiseSpec(0.3, 0.3)
    base = marginal_loglik(s, p, R, temporal_kernel(s.times, 0.1), noise)
    t_new = s.times[-1] + 0.77
    t = np.append(s.times, t_new)
    aug = SubjectLongitudinal(
        "a", t, np.append(s.values1, np.nan), np.append(s.values2, np.nan),
        np.append(s.mask1, False), np.append(s.mask2, False),
    )
    assert marginal_loglik(aug, p, R, temporal_kernel(t, 0.1), noise) == pytest.approx(base, abs=1e-9)


# -- prediction

def test_noise_free_interpolation(rng):
    s = make_subject(rng, 4)
    p = SubjectLongParams(5.0, 20.0, 1.0)
    k = temporal_kernel(s.times, 0.1)
    pred = predict_biomarkers(s, p, build_R(1.0, 0.5), k, NoiseSpec(1e-10, 1e-10), s.times[2])
    np.testing.assert_allclose(pred.mean, [s.values1[2], s.values2[2]], atol=1e-5)


def test_prior_reversion(rng):
    s = make_subject(rng, 4)
    p = SubjectLongParams(5.0, 20.0, 0.6)
    R = build_R(1.5, 0.3)
    pred = predict_biomarkers(s, p, R, temporal_kernel(s.times, 0.1), NoiseSpec(0.3, 0.3), 1e4)
    np.testing.assert_allclose(pred.mean, [5.0, 20.0], atol=1e-12)
    np.testing.assert_allclose(pred.cov, 0.6 * R.R, atol=1e-12)


def test_predict_matches_conditional_oracle(rng):
    s = make_subject(rng, 7)
    p = SubjectLongParams(5.1, 19.7, 1.4)
    R = build_R(1.3, 0.8)
    noise = NoiseSpec(0.25, 0.4)
    pred = predict_biomarkers(s, p, R, temporal_kernel(s.times, 0.1), noise, 4.4)
    m, c = brute_predict(s, p, R, 0.1, noise, 4.4)
    np.testing.assert_allclose(pred.mean, m, atol=1e-8)
    np.testing.assert_allclose(pred.cov, c, atol=1e-8)


def test_trajectory_observed_grid_zero_noise(rng):
    s = make_subject(rng, 5)
    p = SubjectLongParams(5.0, 20.0, 1.0)
    out = predict_trajectory(s, p, build_R(1, 0.2), temporal_kernel(s.times, 0.1), NoiseSpec(1e-10, 1e-10), s.times)
    means = np.array([o.mean for o in out])
    np.testing.assert_allclose(means[:, 0], s.values1, atol=1e-4)
    np.testing.assert_allclose(means[:, 1], s.values2, atol=1e-4)


def test_trajectory_single_point(rng):
    s = make_subject(rng, 5, 0.7)
    args = (s, SubjectLongParams(5, 20, 1), build_R(1, 0.2), temporal_kernel(s.times, 0.1), NoiseSpec(0.3, 0.3))
    a = predict_trajectory(*args, [3.3])[0]
    b = predict_biomarkers(*args, 3.3)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)


def test_trajectory_pointwise(rng):
    s = make_subject(rng, 8, 0.75)
    p = SubjectLongParams(5, 20, 0.8)
    R = build_R(2.0, -0.6)
    noise = NoiseSpec(0.3, 0.5)
    grid = np.linspace(0, 15, 25)
    out = predict_trajectory(s, p, R, temporal_kernel(s.times, 0.1), noise, grid)
    for g, o in zip(grid, out):
        m, c = brute_predict(s, p, R, 0.1, noise, g)
        np.testing.assert_allclose(o.mean, m, atol=1e-12, rtol=1e-12)
        np.testing.assert_allclose(o.cov, c, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0, 15))
def test_predictive_variance_bounded_by_prior(seed, t_star):
    r = np.random.default_rng(seed)
    s = make_subject(r, 6, 0.7)
    p = SubjectLongParams(5, 20, 0.9)
    R = build_R(1.4, 0.5)
    pred = predict_biomarkers(s, p, R, temporal_kernel(s.times, 0.1), NoiseSpec(0.3, 0.3), t_star)
    assert np.array_equal(pred.cov, pred.cov.T)
    assert np.all(np.diag(pred.cov) >= 0)
    assert np.all(np.diag(pred.cov) <= np.diag(0.9 * R.R) + 1e-8)


@given(st.integers(0, 2**32 - 1))
def test_prediction_linear_in_observations(seed):
    r = np.random.default_rng(seed)
    s = make_subject(r, 6, 0.8)
    p = SubjectLongParams(0.0, 0.0, 1.1)
    args = (p, build_R(1.2, 0.4), temporal_kernel(s.times, 0.1), NoiseSpec(0.3, 0.3), 7.0)
    v1 = r.standard_normal((2, 6))
    v2 = r.standard_normal((2, 6))

    def pred(v):
        sub = SubjectLongitudinal("a", s.times, v[0], v[1], s.mask1, s.mask2)
        return predict_biomarkers(sub, *args).mean

    np.testing.assert_allclose(pred(2 * v1 - 3 * v2), 2 * pred(v1) - 3 * pred(v2), atol=1e-10)
