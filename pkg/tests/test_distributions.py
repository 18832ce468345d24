"""Densities, CDFs and parameterizations of normal / skew-normal laws."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import multivariate_normal as mvn

from fmsnc.distributions import (EsnParams, Partition, esn_cdf, esn_logpdf, esn_pdf,
                                 esn_rect_prob, esn_rvs, inv_symmetric_sqrt,
                                 marginal_conditional_split, mvn_logpdf, mvn_pdf,
                                 mvn_rect_prob, sn_cov, sn_mean, symmetric_sqrt)
from fmsnc.errors import SingularMatrixError

from conftest import random_params, random_spd


# symmetric_sqrt

def test_sqrt_reference_matrix():
    f = symmetric_sqrt(np.array([[3.0, 1.0], [1.0, 4.5]]))
    np.testing.assert_allclose([f[0, 0], f[0, 1], f[1, 1]], [1.7121, 0.2620, 2.1051], atol=1e-3)


def test_sqrt_identity_and_diagonal():
    np.testing.assert_allclose(symmetric_sqrt(np.eye(3)), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(symmetric_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]),
                               atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_sqrt_squares_back_and_is_symmetric(p, seed):
    m = random_spd(np.random.default_rng(seed), p, 0.1)
    f = symmetric_sqrt(m)
    assert np.array_equal(f, f.T)
    assert np.abs(f @ f - m).max() <= 1e-8 * np.abs(m).max()
    assert np.linalg.eigvalsh(f).min() > 0
    np.testing.assert_allclose(inv_symmetric_sqrt(m) @ f, np.eye(p), atol=1e-8)


def test_sqrt_rejects_singular_and_asymmetric():
    with pytest.raises(SingularMatrixError):
        symmetric_sqrt(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        symmetric_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


# EsnParams derived quantities

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1), st.floats(-3, 3))
def test_derived_quantities_are_consistent(p, seed, tau):
    P = random_params(np.random.default_rng(seed), p, tau=tau)
    np.testing.assert_allclose(P.gamma + np.outer(P.delta, P.delta), P.sigma, atol=1e-8)
    np.testing.assert_allclose(P.sqrt_sigma @ P.sqrt_sigma, P.sigma, atol=1e-8)
    assert np.linalg.eigvalsh(P.gamma).min() > -1e-10
    assert 0 < P.xi <= 1
    np.testing.assert_allclose(P.sqrt_sigma @ P.varphi, P.lam, atol=1e-8)
    again = EsnParams(P.mu, P.sigma, P.lam, P.tau)
    np.testing.assert_array_equal(again.delta, P.delta)


def test_params_validation():
    with pytest.raises(ValueError):
        EsnParams([0, 0], np.eye(3), [0, 0])
    with pytest.raises(SingularMatrixError):
        EsnParams([0, 0], [[1, 2], [2, 1]], [0, 0])
    with pytest.raises(ValueError):
        EsnParams([0, 0], [[1, 0.5], [0.4, 1]], [0, 0])


def test_from_delta_gamma_round_trip(rng):
    P = random_params(rng, 3)
    Q = EsnParams.from_delta_gamma(P.mu, P.delta, P.gamma)
    np.testing.assert_allclose(Q.sigma, P.sigma, atol=1e-10)
    np.testing.assert_allclose(Q.lam, P.lam, atol=1e-8)


def test_partition_reassembles(rng):
    P = random_params(rng, 4)
    part = Partition.from_mask([True, False, True, False], P)
    np.testing.assert_array_equal(part.assemble(part.mu_o, part.mu_c), P.mu)
    np.testing.assert_array_equal(part.sigma_oc, part.sigma_co.T)
    with pytest.raises(ValueError):
        Partition([0, 1], [1, 2, 3], P)


# normal density and rectangle probability

def test_mvn_pdf_reference_values():
    assert mvn_pdf(np.zeros(2), np.zeros(2), np.eye(2)) == pytest.approx(1 / (2 * math.pi))
    mu = np.array([1.5, -2.0])
    assert mvn_pdf(mu, mu, np.diag([4.0, 9.0])) == pytest.approx(1 / (2 * math.pi * 6))


def test_mvn_logpdf_matches_scipy(rng):
    S = random_spd(rng, 3)
    y = rng.normal(size=(20, 3))
    np.testing.assert_allclose(mvn_logpdf(y, np.ones(3), S), mvn.logpdf(y, np.ones(3), S),
                               rtol=1e-12)


def test_mvn_rect_prob_reference_values():
    assert mvn_rect_prob([-np.inf] * 3, [np.inf] * 3, np.zeros(3), np.eye(3)) == 1.0
    assert mvn_rect_prob([0.0], [np.inf], [0.0], [[1.0]]) == pytest.approx(0.5, abs=1e-15)
    got = mvn_rect_prob([0, 0], [np.inf, np.inf], [0, 0], [[1, 0.5], [0.5, 1]])
    assert got == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        mvn_rect_prob([1.0, 0.0], [0.0, 1.0], np.zeros(2), np.eye(2))


# skew-normal density

def test_esn_reduces_to_normal(rng):
    S = random_spd(rng, 3)
    mu = rng.normal(size=3)
    y = rng.normal(size=(10, 3))
    P = EsnParams.normal(mu, S)
    np.testing.assert_allclose(esn_pdf(y, P), mvn_pdf(y, mu, S), rtol=1e-14)
    Q = EsnParams(mu, S, rng.normal(size=3), tau=50.0)
    np.testing.assert_allclose(esn_pdf(y, Q), mvn_pdf(y, mu, S), atol=1e-6)


def test_sn_density_formula(rng):
    P = random_params(rng, 2)
    y = rng.normal(size=2)
    from scipy.stats import norm
    want = 2 * mvn.pdf(y, P.mu, P.sigma) * norm.cdf(P.varphi @ (y - P.mu))
    assert esn_pdf(y, P) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.2, 0.8])
def test_esn_density_integrates_to_one(tau):
    P = EsnParams([0.5, -0.3], [[1.2, 0.4], [0.4, 0.9]], [2.5, -1.5], tau)
    f = lambda x2, x1: esn_pdf(np.array([x1, x2]), P)
    total = integrate.dblquad(f, -9, 9, -9, 9, epsabs=1e-9)[0]
    assert total == pytest.approx(1.0, abs=1e-4)


def test_esn_logpdf_finite_far_in_the_tail():
    P = EsnParams([0.0], [[1.0]], [5.0])
    assert np.isfinite(esn_logpdf(np.array([-30.0]), P))


# CDF and rectangle probabilities

def test_esn_cdf_reduces_to_normal(rng):
    S = random_spd(rng, 2)
    y = rng.normal(size=2)
    P = EsnParams.normal(np.zeros(2), S)
    assert esn_cdf(y, P) == pytest.approx(mvn_rect_prob([-np.inf] * 2, y, np.zeros(2), S),
                                          abs=1e-12)
    assert esn_cdf(np.array([50.0, 50.0]), random_params(rng, 2)) == pytest.approx(1.0)


def test_esn_cdf_matches_simulation():
    P = EsnParams([0.2, -0.1], [[1.0, 0.3], [0.3, 2.0]], [3.0, -2.0], 0.5)
    draws = esn_rvs(P, 1_000_000, np.random.default_rng(7))
    for y in ([0.5, 0.0], [1.5, -1.0], [-0.2, 1.2]):
        hit = (draws <= y).all(axis=1)
        se = math.sqrt(hit.mean() * (1 - hit.mean()) / hit.size)
        assert abs(esn_cdf(np.array(y), P) - hit.mean()) <= 3 * se


def test_esn_rect_prob_cases(rng):
    P = random_params(rng, 3, tau=0.4)
    assert esn_rect_prob([-np.inf] * 3, [np.inf] * 3, P) == pytest.approx(1.0, abs=1e-12)
    N = EsnParams.normal(P.mu, P.sigma)
    a, b = P.mu - 1, P.mu + 0.5
    assert esn_rect_prob(a, b, N) == pytest.approx(mvn_rect_prob(a, b, P.mu, P.sigma),
                                                   abs=1e-10)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_rect_prob_paths_agree(p, rng):
    for _ in range(5):
        P = random_params(rng, p, tau=rng.normal())
        a = P.mu - np.abs(rng.normal(size=p))
        b = P.mu + np.abs(rng.normal(size=p))
        a[rng.random(p) < 0.3] = -np.inf
        assert esn_rect_prob(a, b, P) == pytest.approx(
            esn_rect_prob(a, b, P, method="corners"), abs=1e-6)


def test_rect_prob_matches_rejection_estimate():
    P = EsnParams([0.0, 1.0], [[2.0, -0.5], [-0.5, 1.0]], [-2.0, 3.0], -0.3)
    a, b = np.array([-1.0, 0.5]), np.array([1.0, 2.5])
    draws = esn_rvs(P, 1_000_000, np.random.default_rng(3))
    hit = ((draws >= a) & (draws <= b)).all(axis=1).mean()
    se = math.sqrt(hit * (1 - hit) / 1_000_000)
    assert abs(esn_rect_prob(a, b, P) - hit) <= 3 * se


# marginal / conditional factorization

@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2 ** 32 - 1), st.floats(-2, 2))
def test_factorization(p, seed, tau):
    rng = np.random.default_rng(seed)
    P = random_params(rng, p, tau=tau)
    k = int(rng.integers(1, p))
    idx1 = np.sort(rng.choice(p, size=k, replace=False))
    marg, cond = marginal_conditional_split(P, idx1)
    for y in P.mu + rng.normal(size=(4, p)):
        c = cond(y[idx1])
        lhs = esn_logpdf(y, P)
        rhs = esn_logpdf(y[idx1], marg) + esn_logpdf(y[cond.idx2], c)
        assert rhs == pytest.approx(lhs, rel=1e-10, abs=1e-10)


def test_gaussian_split_formulas(rng):
    S = random_spd(rng, 3)
    P = EsnParams.normal(np.arange(3.0), S)
    marg, cond = marginal_conditional_split(P, [0])
    assert marg.is_normal
    c = cond(np.array([1.3]))
    reg = S[1:, 0] / S[0, 0]
    np.testing.assert_allclose(c.mu, np.arange(3.0)[1:] + reg * 1.3, atol=1e-12)
    np.testing.assert_allclose(c.sigma, S[1:, 1:] - np.outer(reg, S[0, 1:]), atol=1e-12)
    assert c.is_normal


def test_zero_block_skewness_gives_normal_conditional():
    P = EsnParams([0, 0], np.diag([2.0, 3.0]), [1.5, 0.0])
    _, cond = marginal_conditional_split(P, [0])
    assert not cond(np.array([0.7])).lam.any()


def test_sampler_moments_match_closed_forms():
    P = EsnParams([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]], [2.0, -1.0], 0.7)
    x = esn_rvs(P, 400_000, np.random.default_rng(1))
    se = x.std(axis=0) / math.sqrt(x.shape[0])
    assert (np.abs(x.mean(axis=0) - sn_mean(P)) <= 4 * se).all()
    np.testing.assert_allclose(np.cov(x.T), sn_cov(P), atol=0.02)
