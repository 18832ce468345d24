"""Single-component censored skew-normal model: E-step, M-step, likelihood and EM."""

import math

import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.stats import multivariate_normal as mvn

from fmsnc.analysis import CensorScheme, SimulationDesign, simulate
from fmsnc.censored import (EMConfig, EStepBatch, component_e_step, e_step, e_step_censored,
                            e_step_mixed, e_step_observed, fit_mnc, fit_msnc, m_step,
                            msnc_loglik, recover_sn_params, split_missing_censored)
from fmsnc.data import CensoredData, CensoredSample
from fmsnc.distributions import EsnParams, esn_pdf, esn_rvs, mvn_logpdf, sn_mean, symmetric_sqrt
from fmsnc.errors import BoundaryError, DegenerateRegionError, NumericalError
from fmsnc.mixture import MixtureModel, empirical_info_se
from fmsnc.truncated import count_moment_calls, tn_moments_batch

from conftest import CENSORING_TRUTH, random_params, random_spd

B = math.sqrt(2 / math.pi)
FIELDS = ("y_hat", "y2_hat", "t_hat", "t2_hat", "ty_hat", "y0_hat", "loglik")


def _close(a, b, atol, fields=FIELDS):
    for f in fields:
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), atol=atol, err_msg=f)


def _sample(y, lower, upper):
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    c = np.isfinite(lower) | np.isfinite(upper) | np.isnan(y)
    return CensoredSample(np.where(c, np.nan, y), c, np.where(c, lower, -np.inf),
                          np.where(c, upper, np.inf))


def _augmented_oracle(s, params):
    """Gaussian conditioning of the augmented normal (Y, T), truncated on the censored block."""
    p = params.p
    c = np.flatnonzero(s.censored)
    o = np.flatnonzero(~s.censored)
    cov = np.zeros((p + 1, p + 1))
    cov[:p, :p] = params.sigma
    cov[:p, p] = cov[p, :p] = params.delta
    cov[p, p] = 1.0
    m = np.r_[params.mu, 0.0]
    cc = np.r_[c, p]
    base = math.log(2.0)
    if o.size:
        b = np.linalg.solve(cov[np.ix_(o, o)], cov[np.ix_(o, cc)]).T
        mc = m[cc] + b @ (s.values[o] - m[o])
        sc = cov[np.ix_(cc, cc)] - b @ cov[np.ix_(o, cc)]
        base += mvn_logpdf(s.values[o], params.mu[o], params.sigma[np.ix_(o, o)])
    else:
        mc, sc = m[cc], cov[np.ix_(cc, cc)]
    lo = np.r_[s.lower[c], 0.0]
    hi = np.r_[s.upper[c], np.inf]
    a, m1, m2 = tn_moments_batch(lo[None], hi[None], mc, sc, split=False)
    m1, m2 = m1[0], m2[0]
    yh = np.empty(p)
    yh[o] = s.values[o]
    yh[c] = m1[:-1]
    y2 = np.outer(yh, yh)
    y2[np.ix_(c, c)] = m2[:-1, :-1]
    ty = yh * m1[-1]
    ty[c] = m2[:-1, -1]
    return dict(y_hat=yh, y2_hat=y2, t_hat=m1[-1], t2_hat=m2[-1, -1], ty_hat=ty,
                loglik=base + math.log(a[0]))


def _random_sample(rng, params, case):
    p = params.p
    y = rng.normal(size=p) * 1.5 + params.mu
    cm = rng.random(p) < 0.6
    if case % 4 == 0:
        cm[:] = True
    lo = np.where(cm, y - np.abs(rng.normal(size=p)), -np.inf)
    hi = np.where(cm, y + np.abs(rng.normal(size=p)), np.inf)
    r = rng.random(p)
    lo[cm & (r < 0.3)] = -np.inf
    hi[cm & (r > 0.7)] = np.inf
    miss = cm & (rng.random(p) < 0.3)
    lo[miss], hi[miss] = -np.inf, np.inf
    return CensoredSample(np.where(cm, np.nan, y), cm, lo, hi)


def _grid(a, b, n=64):
    x, w = leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def _joint_quadrature(params, y_obs, o, c, lower_c, upper_c, t_max=12.0, n=64):
    """Moments of (T, Y_c) given Y_o = y_obs and Y_c in a finite box, by tensor Gauss-Legendre
    on the joint density 2 phi(t) N(y; mu + Delta t, Gamma)."""
    p = params.p
    axes = [_grid(0.0, t_max, n)] + [_grid(lower_c[k], upper_c[k], n) for k in range(len(c))]
    mesh = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    wts = np.ones_like(mesh[0])
    for k, (_, w) in enumerate(axes):
        shape = [1] * len(axes)
        shape[k] = -1
        wts = wts * w.reshape(shape)
    t = mesh[0].ravel()
    y = np.empty((t.size, p))
    y[:, o] = y_obs
    for k, idx in enumerate(c):
        y[:, idx] = mesh[k + 1].ravel()
    dens = 2 * np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    dens = dens * mvn.pdf(y - np.outer(t, params.delta), params.mu, params.gamma)
    f = dens * wts.ravel()
    mass = f.sum()
    return dict(mass=mass, y_hat=f @ y / mass, y2_hat=np.einsum("n,ni,nj->ij", f, y, y) / mass,
                t_hat=f @ t / mass, t2_hat=f @ (t * t) / mass, ty_hat=(f * t) @ y / mass)


# log-likelihood

def test_loglik_normal_reduction(rng):
    sigma = random_spd(rng, 3)
    mu = rng.normal(size=3)
    y = rng.normal(size=(20, 3))
    ll = msnc_loglik(CensoredData.from_complete(y), EsnParams.normal(mu, sigma))
    assert ll == pytest.approx(mvn.logpdf(y, mu, sigma).sum(), rel=1e-12)


def test_loglik_fully_missing_row_is_zero(rng):
    params = random_params(rng, 2)
    s = CensoredSample([np.nan, np.nan], [True, True], [-np.inf, -np.inf], [np.inf, np.inf])
    assert msnc_loglik([s], params) == pytest.approx(0.0, abs=1e-12)
    st = e_step(s, params)
    np.testing.assert_allclose(st.y_hat, sn_mean(params), atol=1e-10)


def test_loglik_mixed_matches_quadrature():
    params = EsnParams([0.5, -1.0], [[2.0, 0.7], [0.7, 1.5]], [-2.0, 3.0])
    s = _sample(np.array([0.8, np.nan]), [-np.inf, -2.0], [np.inf, 0.5])
    direct = integrate.quad(lambda x: esn_pdf(np.array([0.8, x]), params), -2.0, 0.5,
                            epsabs=1e-13, epsrel=1e-12)[0]
    assert msnc_loglik([s], params) == pytest.approx(math.log(direct), abs=1e-5)


def test_loglik_censored_matches_quadrature():
    params = EsnParams([0.0, 1.0], [[1.0, -0.4], [-0.4, 2.0]], [1.0, 2.0])
    s = _sample(np.full(2, np.nan), [-1.0, 0.0], [1.0, 2.5])
    q = _joint_quadrature(params, np.zeros(0), np.array([], int), np.array([0, 1]),
                          [-1.0, 0.0], [1.0, 2.5])
    assert msnc_loglik([s], params) == pytest.approx(math.log(q["mass"]), abs=1e-8)


def test_zero_probability_row_raises():
    params = EsnParams.normal([0.0], [[1.0]])
    s = _sample(np.array([np.nan]), [60.0], [61.0])
    with pytest.raises(DegenerateRegionError):
        msnc_loglik([s], params)
    with pytest.raises(DegenerateRegionError):
        e_step(s, params)


# E-step: observed rows

def test_observed_normal_gives_half_normal_moments(rng):
    params = EsnParams.normal(rng.normal(size=2), random_spd(rng, 2))
    st = e_step_observed(CensoredSample.observed(rng.normal(size=2)), params)
    assert st.t_hat == pytest.approx(B, abs=1e-12)
    assert st.t2_hat == pytest.approx(1.0, abs=1e-12)


def test_observed_conditional_variance_nonnegative(rng):
    params = random_params(rng, 3)
    y = esn_rvs(params, 100, rng) + rng.normal(size=(100, 3)) * 3
    st = component_e_step(CensoredData.from_complete(y), params)
    assert (st.t2_hat - st.t_hat ** 2 >= 0).all()


@pytest.mark.parametrize("y", [-2.0, 0.3, 4.0])
def test_observed_univariate_matches_quadrature(y):
    params = EsnParams([0.5], [[2.0]], [-3.0])
    d, g = params.delta[0], params.gamma[0, 0]

    def f(t, k):
        return t ** k * math.exp(-0.5 * t * t - 0.5 * (y - params.mu[0] - d * t) ** 2 / g)

    mass = integrate.quad(f, 0, np.inf, args=(0,), epsabs=1e-14)[0]
    m1 = integrate.quad(f, 0, np.inf, args=(1,), epsabs=1e-14)[0] / mass
    m2 = integrate.quad(f, 0, np.inf, args=(2,), epsabs=1e-14)[0] / mass
    st = e_step_observed(CensoredSample.observed([y]), params)
    assert st.t_hat == pytest.approx(m1, abs=1e-6)
    assert st.t2_hat == pytest.approx(m2, abs=1e-6)
    assert st.ty_hat[0] == pytest.approx(y * m1, abs=1e-6)


# E-step: censored rows

def test_censored_whole_space_is_sn_mean(rng):
    params = random_params(rng, 2)
    s = CensoredSample(np.full(2, np.nan), [True, True], [-np.inf] * 2, [np.inf] * 2)
    st = e_step_censored(s, params)
    np.testing.assert_allclose(st.y_hat, sn_mean(params), atol=1e-6)


def test_censored_normal_t_hat(rng):
    params = EsnParams.normal([0.0, 0.0], [[1.0, 0.3], [0.3, 1.0]])
    st = e_step_censored(_sample(np.full(2, np.nan), [-1.0, 0.0], [0.5, np.inf]), params)
    assert st.t_hat == pytest.approx(B, abs=1e-12)
    assert st.t2_hat == pytest.approx(1.0, abs=1e-12)


def test_censored_matches_joint_quadrature():
    params = EsnParams([0.0, 1.0], [[1.0, -0.4], [-0.4, 2.0]], [1.0, 2.0])
    lo, hi = [-1.0, 0.0], [1.0, 2.5]
    st = e_step_censored(_sample(np.full(2, np.nan), lo, hi), params)
    q = _joint_quadrature(params, np.zeros(0), np.array([], int), np.array([0, 1]), lo, hi)
    for f in ("y_hat", "y2_hat", "t_hat", "t2_hat", "ty_hat"):
        np.testing.assert_allclose(getattr(st, f), q[f], atol=1e-4, err_msg=f)


# E-step: mixed rows

def test_mixed_matches_joint_quadrature():
    params = EsnParams([0.5, -0.5, 1.0], [[2.0, 0.5, 0.3], [0.5, 1.0, -0.2], [0.3, -0.2, 1.5]],
                       [2.0, -1.0, 1.5])
    lo, hi = [-2.0, 0.0], [0.5, 3.0]
    y = np.array([1.2, np.nan, np.nan])
    st = e_step_mixed(_sample(y, [-np.inf] + lo, [np.inf] + hi), params)
    q = _joint_quadrature(params, np.array([1.2]), np.array([0]), np.array([1, 2]), lo, hi,
                          n=48)
    for f in ("y_hat", "y2_hat", "t_hat", "t2_hat", "ty_hat"):
        np.testing.assert_allclose(getattr(st, f), q[f], atol=1e-4, err_msg=f)


def test_mixed_missing_block_is_conditional_esn_mean():
    params = EsnParams([0.0, 1.0, -1.0], np.eye(3) + 0.4, [1.0, -2.0, 0.5])
    s = _sample(np.array([0.7, np.nan, np.nan]), [-np.inf] * 3, [np.inf] * 3)
    with count_moment_calls() as calls:
        st = split_missing_censored(s, params)
    assert calls.evaluations == 0
    ref = _augmented_oracle(s, params)
    np.testing.assert_allclose(st.y_hat, ref["y_hat"], atol=1e-10)
    np.testing.assert_allclose(st.y2_hat, ref["y2_hat"], atol=1e-10)


def test_mixed_normal_is_gaussian_conditioning():
    sigma = np.array([[2.0, 0.6, 0.2], [0.6, 1.0, 0.1], [0.2, 0.1, 1.5]])
    mu = np.array([0.0, 1.0, -1.0])
    y1 = 0.4
    s = _sample(np.array([y1, np.nan, np.nan]), [-np.inf] * 3, [np.inf] * 3)
    st = split_missing_censored(s, EsnParams.normal(mu, sigma))
    reg = sigma[1:, :1] / sigma[0, 0]
    expected = mu[1:] + (reg * (y1 - mu[0])).ravel()
    np.testing.assert_allclose(st.y_hat[1:], expected, atol=1e-12)
    cond = sigma[1:, 1:] - reg @ sigma[:1, 1:]
    np.testing.assert_allclose(st.y2_hat[1:, 1:], cond + np.outer(expected, expected),
                               atol=1e-12)


def test_mixed_normal_truncation_matches_tn(rng):
    sigma = random_spd(rng, 3)
    mu = rng.normal(size=3)
    s = _sample(np.array([0.3, np.nan, np.nan]), [-np.inf, -1.0, -np.inf], [np.inf, 1.0, 0.2])
    st = e_step_mixed(s, EsnParams.normal(mu, sigma))
    reg = sigma[1:, :1] / sigma[0, 0]
    mc = mu[1:] + (reg * (0.3 - mu[0])).ravel()
    sc = sigma[1:, 1:] - reg @ sigma[:1, 1:]
    _, m1, m2 = tn_moments_batch(s.lower[None, 1:], s.upper[None, 1:], mc, sc)
    np.testing.assert_allclose(st.y_hat[1:], m1[0], atol=1e-10)
    np.testing.assert_allclose(st.y2_hat[1:, 1:], m2[0], atol=1e-10)


def test_e_step_matches_augmented_oracle():
    rng = np.random.default_rng(11)
    for case in range(40):
        p = int(rng.integers(1, 4))
        params = EsnParams(rng.normal(size=p), random_spd(rng, p, 0.5), rng.normal(size=p) * 2)
        s = _random_sample(rng, params, case)
        st = e_step(s, params)
        ref = _augmented_oracle(s, params)
        for f, v in ref.items():
            np.testing.assert_allclose(getattr(st, f), v, atol=1e-6, err_msg=f"{case} {f}")


def test_split_matches_mixed_path():
    rng = np.random.default_rng(12)
    checked = 0
    for case in range(60):
        p = int(rng.integers(2, 4))
        params = EsnParams(rng.normal(size=p), random_spd(rng, p, 0.5), rng.normal(size=p) * 2)
        s = _random_sample(rng, params, case)
        if not s.missing.any():
            continue
        checked += 1
        _close(split_missing_censored(s, params), e_step(s, params, split=False), 1e-6)
    assert checked >= 10


@pytest.mark.parametrize("lam, latent", [([1.0, -2.0, 0.5], 1), ([0.0, 0.0, 0.0], 0)])
def test_split_only_truncates_censored_coordinates(lam, latent):
    # a skew component adds the latent coordinate to every recurrence
    params = EsnParams([0.0, 1.0, -1.0], np.eye(3) + 0.4, lam)
    s = _sample(np.array([0.7, np.nan, np.nan]), [-np.inf, -1.0, -np.inf],
                [np.inf, 1.0, np.inf])
    with count_moment_calls() as calls:
        a = split_missing_censored(s, params)
    assert calls.max_dim == 1 + latent
    with count_moment_calls() as calls:
        b = e_step_mixed(s, params, split=False)
    assert calls.max_dim == 2 + latent
    _close(a, b, 1e-6)


def test_case_consistency(rng):
    params = random_params(rng, 3)
    y = rng.normal(size=3)
    full = component_e_step(CensoredData.from_complete(y[None]), params)
    obs = e_step_observed(CensoredSample.observed(y), params)
    for f in ("y_hat", "y2_hat", "t_hat", "t2_hat", "ty_hat", "loglik"):
        np.testing.assert_allclose(getattr(full.row(0), f), getattr(obs, f), atol=1e-10)
    s = _sample(np.full(3, np.nan), [-1.0, -np.inf, 0.0], [1.0, 0.5, np.inf])
    batch = component_e_step(CensoredData.from_samples([s]), params).row(0)
    _close(batch, e_step_censored(s, params), 1e-10)


def test_case_dispatch_guards(rng):
    params = random_params(rng, 2)
    with pytest.raises(ValueError):
        e_step_observed(_sample(np.array([0.0, np.nan]), [-np.inf, 0], [np.inf, 1]), params)
    with pytest.raises(ValueError):
        e_step_censored(CensoredSample.observed([0.0, 1.0]), params)
    with pytest.raises(ValueError):
        e_step_mixed(CensoredSample.observed([0.0, 1.0]), params)


def test_e_step_invariants(rng):
    for case in range(20):
        params = random_params(rng, 3)
        s = _random_sample(rng, params, case)
        st = e_step(s, params)
        np.testing.assert_allclose(st.y2_hat, st.y2_hat.T, atol=1e-12)
        assert st.t2_hat >= st.t_hat ** 2 - 1e-8
        c = s.censored
        assert (st.y_hat[c] >= s.lower[c]).all() and (st.y_hat[c] <= s.upper[c]).all()
        np.testing.assert_array_equal(st.y_hat[~c], s.values[~c])


# M-step and parameter recovery

def test_m_step_moment_identity(rng):
    y = rng.normal(size=(50, 2)) * 2 + 1
    n = y.shape[0]
    stats = EStepBatch(y, np.einsum("ni,nj->nij", y, y), np.full(n, B), np.ones(n), B * y,
                       y.copy(), np.zeros(n))
    mu, delta, _ = m_step(stats, np.zeros(2))
    np.testing.assert_allclose(mu + B * delta, y.mean(axis=0), atol=1e-12)


def test_m_step_repeated_observation():
    y0 = np.array([1.5, -2.0])
    y = np.tile(y0, (10, 1))
    stats = EStepBatch(y, np.einsum("ni,nj->nij", y, y), np.full(10, B), np.ones(10), B * y,
                       y.copy(), np.zeros(10))
    mu, delta, gamma = m_step(stats, np.zeros(2), fix_delta_zero=True)
    np.testing.assert_allclose(mu, y0, atol=1e-12)
    np.testing.assert_array_equal(delta, 0.0)
    assert np.abs(gamma).max() < 1e-250


def test_m_step_degenerate_t2_raises():
    y = np.ones((3, 1))
    stats = EStepBatch(y, np.ones((3, 1, 1)), np.zeros(3), np.zeros(3), np.zeros((3, 1)), y,
                       np.zeros(3))
    with pytest.raises(NumericalError):
        m_step(stats, np.zeros(1))


def test_one_em_step_increases_loglik(rng):
    truth = random_params(rng, 2)
    data = CensoredData.from_complete(esn_rvs(truth, 300, rng))
    start = EsnParams(truth.mu + 0.5, truth.sigma * 1.5, truth.lam * 0.5)
    st = component_e_step(data, start)
    mu, delta, gamma = m_step(st, start.delta)
    assert msnc_loglik(data, recover_sn_params(mu, delta, gamma)) > msnc_loglik(data, start)


def test_recover_delta_zero(rng):
    gamma = random_spd(rng, 2)
    p = recover_sn_params([0.0, 1.0], np.zeros(2), gamma)
    np.testing.assert_array_equal(p.lam, 0.0)
    np.testing.assert_allclose(p.sigma, gamma, atol=1e-15)


def test_recover_round_trip(rng):
    for _ in range(20):
        params = random_params(rng, 3)
        back = recover_sn_params(params.mu, params.delta, params.gamma)
        np.testing.assert_allclose(back.sigma, params.sigma, atol=1e-10)
        np.testing.assert_allclose(back.lam, params.lam, atol=1e-10)


def test_recover_reference_component():
    sigma = np.array([[3.0, 1.0], [1.0, 4.5]])
    lam = np.array([-2.0, 2.0])
    w, v = np.linalg.eigh(sigma)
    root = (v * np.sqrt(w)) @ v.T
    delta = root @ (lam / math.sqrt(1 + lam @ lam))
    gamma = sigma - np.outer(delta, delta)
    params = EsnParams([-3.0, -4.0], sigma, lam)
    np.testing.assert_allclose(params.delta, delta, atol=1e-12)
    np.testing.assert_allclose(params.gamma, gamma, atol=1e-12)
    back = recover_sn_params(params.mu, delta, gamma)
    np.testing.assert_allclose(back.sigma, sigma, atol=1e-8)
    np.testing.assert_allclose(back.lam, lam, atol=1e-8)
    np.testing.assert_allclose(symmetric_sqrt(sigma), root, atol=1e-12)


def test_recover_boundary_raises():
    with pytest.raises(BoundaryError):
        recover_sn_params([0.0], [1.0], [[-1e-3]])


# EM drivers

def test_fit_complete_data_recovers_location():
    truth = EsnParams([1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]], [3.0, -1.0])
    rng = np.random.default_rng(77)
    data = CensoredData.from_complete(esn_rvs(truth, 2000, rng))
    fit = fit_msnc(data, EsnParams(data.values.mean(0), np.cov(data.values.T), [1.0, -1.0]))
    assert fit.converged
    se, labels, _ = empirical_info_se(data, MixtureModel([1.0], [fit.params]))
    se_mu = se[[labels.index("mu1_1"), labels.index("mu1_2")]]
    assert (np.abs(fit.params.mu - truth.mu) <= 3 * se_mu).all()


def test_fit_converges_on_censored_two_group_data():
    design = SimulationDesign(CENSORING_TRUTH, 500, CensorScheme("left_quantile", 0.05), seed=3)
    data = simulate(design).data
    y = np.where(data.censored, data.upper, data.values)
    init = EsnParams(y.mean(0), np.cov(y.T), [1.0, 1.0])
    fit = fit_msnc(data, init, EMConfig(max_iter=500))
    assert fit.converged and fit.iterations <= 500
    tr = np.array(fit.loglik_trace)
    assert (np.diff(tr) >= -1e-8 * np.abs(tr[:-1])).all()


def test_fit_from_truth_does_not_decrease():
    truth = EsnParams([0.0, 0.0], [[1.0, 0.3], [0.3, 1.0]], [2.0, 0.0])
    rng = np.random.default_rng(5)
    data = CensoredData.from_complete(esn_rvs(truth, 200, rng))
    fit = fit_msnc(data, truth, EMConfig(max_iter=1))
    assert fit.loglik_trace[1] >= fit.loglik_trace[0]


def test_normal_family_matches_censored_normal_em():
    rng = np.random.default_rng(9)
    sigma = np.array([[1.0, 0.4], [0.4, 2.0]])
    y = rng.multivariate_normal([0.0, 1.0], sigma, size=300)
    cens = y < np.quantile(y, 0.1, axis=0)
    upper = np.where(cens, np.quantile(y, 0.1, axis=0), np.inf)
    data = CensoredData(np.where(cens, np.nan, y), cens, np.full_like(y, -np.inf), upper)
    cfg = EMConfig(family="normal", tol=1e-10)
    a = fit_msnc(data, EsnParams.normal([0.5, 0.5], np.eye(2)), cfg)
    b = fit_mnc(data, [0.5, 0.5], np.eye(2), cfg)
    np.testing.assert_allclose(a.params.mu, b.params.mu, atol=1e-6)
    np.testing.assert_allclose(a.params.sigma, b.params.sigma, atol=1e-6)
    np.testing.assert_array_equal(a.params.lam, 0.0)


def test_config_validation():
    for bad in (dict(tol=0), dict(max_iter=0), dict(family="t"), dict(n_starts=0)):
        with pytest.raises(ValueError):
            EMConfig(**bad)
