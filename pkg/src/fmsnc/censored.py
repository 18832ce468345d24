"""Single-component skew-normal model for censored and missing data.

The latent representation ``Y = mu + Delta T + Gamma^{1/2} Z`` with ``T``
half-normal makes the complete-data likelihood Gaussian in ``(mu, Delta,
Gamma)``.  The E-step needs, for each row, the conditional moments of
``Y`` and ``T`` given what was observed; the three row types (fully
observed, fully censored, mixed) have separate formulas below.  Rows are
processed in batches that share a censoring pattern, because those rows share
every conditional covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from . import monitor
from .data import CensoredData, CensoredSample, as_data
from .distributions import (LOG_2PI, EsnParams, esn_rect_prob, inv_symmetric_sqrt,
                            marginal_conditional_split, mvn_logpdf, symmetric_sqrt)
from .errors import BoundaryError, DegenerateRegionError, NumericalError, SingularMatrixError
from ._mvnprob import rect_prob
from .truncated import (MIN_PROB, augmented_cov, log_eta, ratio_weighted_batch,
                        tesn_moments_batch, tn_moments_batch)

LOG2 = math.log(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
EIG_FLOOR = 1e-8


@dataclass(frozen=True)
class EStepStats:
    """Conditional expectations for one row under one component."""

    y_hat: np.ndarray
    y2_hat: np.ndarray
    t_hat: float
    t2_hat: float
    ty_hat: np.ndarray
    y0_hat: np.ndarray
    loglik: float = float("nan")


@dataclass
class EStepBatch:
    """Row-stacked :class:`EStepStats`; ``loglik`` is ``-inf`` for rows the
    component cannot have generated (their other fields are zero)."""

    y_hat: np.ndarray
    y2_hat: np.ndarray
    t_hat: np.ndarray
    t2_hat: np.ndarray
    ty_hat: np.ndarray
    y0_hat: np.ndarray
    loglik: np.ndarray

    @classmethod
    def empty(cls, n, p):
        return cls(np.zeros((n, p)), np.zeros((n, p, p)), np.zeros(n), np.zeros(n),
                   np.zeros((n, p)), np.zeros((n, p)), np.full(n, -np.inf))

    def row(self, i) -> EStepStats:
        return EStepStats(self.y_hat[i].copy(), self.y2_hat[i].copy(), float(self.t_hat[i]),
                          float(self.t2_hat[i]), self.ty_hat[i].copy(), self.y0_hat[i].copy(),
                          float(self.loglik[i]))

    def put(self, rows, y_hat, y2_hat, t_hat, t2_hat, ty_hat, y0_hat, loglik):
        self.y_hat[rows] = y_hat
        self.y2_hat[rows] = y2_hat
        self.t_hat[rows] = t_hat
        self.t2_hat[rows] = t2_hat
        self.ty_hat[rows] = ty_hat
        self.y0_hat[rows] = y0_hat
        self.loglik[rows] = loglik

    @classmethod
    def stack(cls, stats):
        stats = list(stats)
        return cls(np.array([s.y_hat for s in stats]), np.array([s.y2_hat for s in stats]),
                   np.array([s.t_hat for s in stats]), np.array([s.t2_hat for s in stats]),
                   np.array([s.ty_hat for s in stats]), np.array([s.y0_hat for s in stats]),
                   np.array([s.loglik for s in stats]))


class _Terms:
    """Per-component quantities shared by every row."""

    def __init__(self, params: EsnParams):
        if params.tau != 0.0:
            raise ValueError("model components must have tau = 0")
        self.params = params
        self.mu = params.mu
        self.sigma = params.sigma
        self.varphi = params.varphi
        self.delta = params.delta
        self.gamma = params.gamma
        try:
            self.gamma_inv_delta = np.linalg.solve(self.gamma, self.delta)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("Gamma is singular") from exc
        self.m2 = 1.0 / (1.0 + self.delta @ self.gamma_inv_delta)
        self.m = math.sqrt(self.m2)


def _t_from_observed(y, terms: _Terms):
    """Moments of T given a fully observed y (T | y is normal truncated at 0)."""
    d = y - terms.mu
    mt = terms.m2 * d @ terms.gamma_inv_delta
    a = mt / terms.m
    zeta = np.exp(-0.5 * a * a - 0.5 * LOG_2PI - log_ndtr(a))
    t1 = mt + terms.m * zeta
    t2 = mt * mt + terms.m2 + mt * terms.m * zeta
    return t1, t2


def _t_from_censored(y_hat, y2_hat, y0_hat, gamma_hat, terms: _Terms):
    """Moments of T and TY given partially censored rows."""
    mu, gd = terms.mu, terms.gamma_inv_delta
    m2, m = terms.m2, terms.m
    t1 = m2 * (y_hat - mu) @ gd + gamma_hat * m
    # (y2 - y mu' - mu y' + mu mu') in the quadratic form
    cross = y2_hat - np.einsum("ni,j->nij", y_hat, mu)
    centered = cross - np.einsum("i,nj->nij", mu, y_hat) + np.outer(mu, mu)
    quad = np.einsum("i,nij,j->n", gd, centered, gd)
    t2 = m2 * m2 * quad + m2 + gamma_hat * m2 * m * ((y0_hat - mu) @ gd)
    ty = m2 * cross @ gd + (gamma_hat * m)[:, None] * y0_hat
    return t1, t2, ty


def observed_rows(y, params: EsnParams, terms: _Terms | None = None):
    """Vectorized E-step for fully observed rows ``y`` (n, p)."""
    terms = terms or _Terms(params)
    y = np.atleast_2d(y)
    t1, t2 = _t_from_observed(y, terms)
    loglik = (LOG2 + mvn_logpdf(y, params.mu, params.sigma)
              + log_ndtr((y - params.mu) @ params.varphi))
    y2 = np.einsum("ni,nj->nij", y, y)
    return dict(y_hat=y, y2_hat=y2, t_hat=t1, t2_hat=t2, ty_hat=t1[:, None] * y,
                y0_hat=y.copy(), loglik=np.atleast_1d(loglik))


def _assemble(n, p, o, c, y_o, w1, w2, w0):
    y_hat = np.empty((n, p))
    y_hat[:, o] = y_o
    y_hat[:, c] = w1
    y2 = np.empty((n, p, p))
    y2[np.ix_(np.arange(n), o, o)] = np.einsum("ni,nj->nij", y_o, y_o)
    oc = np.einsum("ni,nj->nij", y_o, w1)
    y2[np.ix_(np.arange(n), o, c)] = oc
    y2[np.ix_(np.arange(n), c, o)] = np.transpose(oc, (0, 2, 1))
    y2[np.ix_(np.arange(n), c, c)] = w2
    y0 = np.empty((n, p))
    y0[:, o] = y_o
    y0[:, c] = w0
    return y_hat, y2, y0


def _finish(valid, terms, y_hat, y2, y0, gamma_hat, loglik):
    n, p = y_hat.shape
    out = dict(y_hat=np.zeros((n, p)), y2_hat=np.zeros((n, p, p)), t_hat=np.zeros(n),
               t2_hat=np.zeros(n), ty_hat=np.zeros((n, p)), y0_hat=np.zeros((n, p)),
               loglik=np.full(n, -np.inf))
    if valid.any():
        t1, t2, ty = _t_from_censored(y_hat[valid], y2[valid], y0[valid], gamma_hat[valid], terms)
        out["y_hat"][valid] = y_hat[valid]
        out["y2_hat"][valid] = (y2[valid] + np.transpose(y2[valid], (0, 2, 1))) / 2
        out["t_hat"][valid] = t1
        out["t2_hat"][valid] = t2
        out["ty_hat"][valid] = ty
        out["y0_hat"][valid] = y0[valid]
        out["loglik"][valid] = loglik[valid]
    return out


def censored_rows(lower, upper, params: EsnParams, terms: _Terms | None = None, split=True):
    """Vectorized E-step for rows with every coordinate censored."""
    terms = terms or _Terms(params)
    lower, upper = np.atleast_2d(lower), np.atleast_2d(upper)
    n, p = lower.shape
    lam_sq = float(params.lam @ params.lam)
    norm_const, w1, w2 = tesn_moments_batch(lower, upper, params.mu, params.sigma,
                                            params.delta, 0.0, split, strict=False)
    valid = norm_const >= MIN_PROB
    gamma_hat = np.zeros(n)
    w0 = np.zeros((n, p))
    if valid.any():
        r0, e0, _ = ratio_weighted_batch(lower[valid], upper[valid], params.mu, params.gamma,
                                         params.delta, 0.0, lam_sq, norm_const[valid], split,
                                         strict=False)
        gamma_hat[valid], w0[valid] = r0, e0
        valid[valid] = np.isfinite(r0)
    with np.errstate(divide="ignore"):
        loglik = np.log(norm_const)
    return _finish(valid, terms, w1, w2, w0, gamma_hat, loglik)


@dataclass(frozen=True)
class _Conditional:
    """Law of the censored block given the observed block (shared parts)."""

    o: np.ndarray
    c: np.ndarray
    reg: np.ndarray          # Sigma_co Sigma_oo^{-1}
    sigma_cc_o: np.ndarray
    varphi_c: np.ndarray
    varphi_o_tilde: np.ndarray
    c_oc: float
    delta_co: np.ndarray
    gamma_co: np.ndarray
    lam_sq_co: float

    @classmethod
    def build(cls, params: EsnParams, o, c):
        s = params.sigma
        s_oo = s[np.ix_(o, o)]
        try:
            reg = np.linalg.solve(s_oo, s[np.ix_(o, c)]).T
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("Sigma_oo is singular") from exc
        s_cc_o = s[np.ix_(c, c)] - reg @ s[np.ix_(o, c)]
        s_cc_o = (s_cc_o + s_cc_o.T) / 2
        phi_c = params.varphi[c]
        phi_o_t = params.varphi[o] + reg.T @ phi_c
        lam_sq = float(phi_c @ s_cc_o @ phi_c)
        c_oc = 1.0 / math.sqrt(1.0 + lam_sq)
        delta_co = c_oc * s_cc_o @ phi_c
        gamma_co = s_cc_o - np.outer(delta_co, delta_co)
        return cls(o, c, reg, s_cc_o, phi_c, phi_o_t, c_oc, delta_co,
                   (gamma_co + gamma_co.T) / 2, lam_sq)

    def locate(self, params, y_o):
        d = y_o - params.mu[self.o]
        mu_co = params.mu[self.c] + d @ self.reg.T
        tau_co = d @ self.varphi_o_tilde
        return mu_co, tau_co

    def params_for(self, params, y_o) -> EsnParams:
        mu_co, tau_co = self.locate(params, np.asarray(y_o, float)[None])
        return EsnParams(mu_co[0], self.sigma_cc_o, symmetric_sqrt(self.sigma_cc_o) @ self.varphi_c,
                         float(tau_co[0]))


def mixed_rows(y_o, lower_c, upper_c, o, c, params: EsnParams, terms: _Terms | None = None,
               split=True, cond: _Conditional | None = None):
    """Vectorized E-step for rows with observed block ``o`` and censored block ``c``."""
    terms = terms or _Terms(params)
    y_o = np.atleast_2d(y_o)
    lower_c, upper_c = np.atleast_2d(lower_c), np.atleast_2d(upper_c)
    n = y_o.shape[0]
    p = params.p
    cond = cond or _Conditional.build(params, o, c)
    mu_co, tau_co = cond.locate(params, y_o)
    tau_t = cond.c_oc * tau_co
    norm_const, w1, w2 = tesn_moments_batch(lower_c, upper_c, mu_co, cond.sigma_cc_o,
                                            cond.delta_co, tau_t, split, strict=False)
    valid = norm_const >= MIN_PROB
    gamma_hat = np.zeros(n)
    w0 = np.zeros((n, c.size))
    if valid.any():
        r0, e0, _ = ratio_weighted_batch(lower_c[valid], upper_c[valid], mu_co[valid],
                                         cond.gamma_co, cond.delta_co, tau_co[valid],
                                         cond.lam_sq_co, norm_const[valid], split, strict=False)
        gamma_hat[valid], w0[valid] = r0, e0
        valid[valid] = np.isfinite(r0)
    w1 = np.where(valid[:, None], w1, 0.0)
    w2 = np.where(valid[:, None, None], w2, 0.0)
    # observed marginal is SN with skewness argument c_oc * tau_co
    with np.errstate(divide="ignore"):
        loglik = (LOG2 + mvn_logpdf(y_o, params.mu[o], params.sigma[np.ix_(o, o)])
                  + log_ndtr(tau_t) + np.log(norm_const))
    y_hat, y2, y0 = _assemble(n, p, o, c, y_o, w1, w2, w0)
    return _finish(valid, terms, y_hat, y2, y0, gamma_hat, loglik)


def component_e_step(data, params: EsnParams, split=True, strict=True) -> EStepBatch:
    """E-step quantities for every row of ``data`` under one component.

    Rows are grouped by censoring pattern.  With ``strict`` a row whose
    censoring region has zero probability raises
    :class:`~fmsnc.errors.DegenerateRegionError`; otherwise it gets
    ``loglik = -inf``.
    """
    data = as_data(data)
    n, p = data.n, data.p
    if p != params.p:
        raise ValueError(f"data has {p} columns but the model has dimension {params.p}")
    terms = _Terms(params)
    out = EStepBatch.empty(n, p)
    patterns, inverse = np.unique(data.censored, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == g)
        c = np.flatnonzero(pattern)
        o = np.flatnonzero(~pattern)
        if c.size == 0:
            res = observed_rows(data.values[rows], params, terms)
        elif o.size == 0:
            res = censored_rows(data.lower[rows], data.upper[rows], params, terms, split)
        else:
            res = mixed_rows(data.values[np.ix_(rows, o)], data.lower[np.ix_(rows, c)],
                             data.upper[np.ix_(rows, c)], o, c, params, terms, split)
        out.put(rows, **res)
    if strict:
        bad = np.flatnonzero(~np.isfinite(out.loglik))
        if bad.size:
            raise DegenerateRegionError(
                f"row {bad[0]} has zero probability under the current parameters")
    return out


def _single(sample: CensoredSample, res) -> EStepStats:
    if not np.isfinite(res["loglik"][0]):
        raise DegenerateRegionError("censoring region has zero probability")
    return EStepStats(res["y_hat"][0], res["y2_hat"][0], float(res["t_hat"][0]),
                      float(res["t2_hat"][0]), res["ty_hat"][0], res["y0_hat"][0],
                      float(res["loglik"][0]))


def e_step_observed(sample: CensoredSample, params: EsnParams) -> EStepStats:
    """E-step for a row with no censored coordinates."""
    if sample.censored.any():
        raise ValueError("sample has censored coordinates")
    return _single(sample, observed_rows(sample.values[None], params))


def e_step_censored(sample: CensoredSample, params: EsnParams, split=True) -> EStepStats:
    """E-step for a row whose coordinates are all censored."""
    if not sample.censored.all():
        raise ValueError("sample has observed coordinates")
    return _single(sample, censored_rows(sample.lower[None], sample.upper[None], params,
                                         split=split))


def e_step_mixed(sample: CensoredSample, params: EsnParams, split=True) -> EStepStats:
    """E-step for a row with both observed and censored coordinates.

    ``split=False`` runs the truncated-moment recurrence over every censored
    coordinate, missing ones included (the reference path).
    """
    c = np.flatnonzero(sample.censored)
    o = np.flatnonzero(~sample.censored)
    if c.size == 0 or o.size == 0:
        raise ValueError("mixed E-step needs both observed and censored coordinates")
    res = mixed_rows(sample.values[o][None], sample.lower[c][None], sample.upper[c][None], o, c,
                     params, split=split)
    return _single(sample, res)


def e_step(sample: CensoredSample, params: EsnParams, split=True) -> EStepStats:
    """Dispatch to the observed, censored or mixed E-step."""
    if not sample.censored.any():
        return e_step_observed(sample, params)
    if sample.censored.all():
        return e_step_censored(sample, params, split)
    return e_step_mixed(sample, params, split)


def split_missing_censored(sample: CensoredSample, params: EsnParams) -> EStepStats:
    """E-step that integrates only over the truly censored coordinates.

    Missing coordinates ``m`` are conditionally ESN given the truly censored
    ones ``k`` and the observed ones, with closed-form moments.  Their first
    two moments follow by iterated expectation; the nonlinear part of
    ``E[Y_m | Y_k]`` enters only through ``E[zeta(A)]`` and ``E[zeta(A) Y_k]``
    over the truncated ``k`` block, where ``zeta = phi / Phi``.
    """
    p = params.p
    cens = np.flatnonzero(sample.censored)
    if cens.size == 0:
        raise ValueError("sample has no censored coordinates")
    miss_mask = sample.missing
    if not miss_mask.any():
        raise ValueError("sample has no missing coordinates; use e_step_mixed")
    terms = _Terms(params)
    o = np.flatnonzero(~sample.censored)
    if o.size:
        cond = _Conditional.build(params, o, cens).params_for(params, sample.values[o])
        y_o = sample.values[o]
        log_obs = (LOG2 + mvn_logpdf(y_o, params.mu[o], params.sigma[np.ix_(o, o)])
                   + log_ndtr(cond.tau_tilde))
    else:
        cond = params
        y_o = np.zeros(0)
        log_obs = 0.0
    # positions inside the censored block
    m_loc = np.flatnonzero(miss_mask[cens])
    k_loc = np.flatnonzero(~miss_mask[cens])
    pc = cens.size
    mu, s = cond.mu, cond.sigma
    lower, upper = sample.lower[cens], sample.upper[cens]
    if k_loc.size == 0:
        # no truncation: conditional ESN moments in closed form
        tt = cond.tau_tilde
        zeta = math.exp(-0.5 * tt * tt - 0.5 * LOG_2PI - log_ndtr(tt))
        w1 = mu + cond.delta * zeta
        w2 = s - zeta * (tt + zeta) * np.outer(cond.delta, cond.delta) + np.outer(w1, w1)
        gamma_hat = math.exp(log_eta(cond.tau, float(cond.lam @ cond.lam)))
        w0 = mu - tt * cond.delta
        norm_const = 1.0
    else:
        marg, cond_m = marginal_conditional_split(cond, k_loc)
        lk, uk = lower[k_loc], upper[k_loc]
        nc, e1, e2 = tesn_moments_batch(lk[None], uk[None], marg.mu, marg.sigma, marg.delta,
                                        marg.tau_tilde)
        norm_const = float(nc[0])
        e1, e2 = e1[0], e2[0]
        r0, g1, _ = ratio_weighted_batch(lk[None], uk[None], marg.mu, marg.gamma, marg.delta,
                                         marg.tau, float(marg.lam @ marg.lam), nc)
        r0 = float(r0[0])
        r1 = r0 * g1[0]
        # Y_m | Y_k = y: location a + B y, skewness direction dm, shift tau_m(y)
        b = cond_m.regression
        a = cond_m.mu2 - b @ cond_m.mu1
        c12 = 1.0 / math.sqrt(1.0 + cond_m.lam2_1 @ cond_m.lam2_1)
        dm = c12 * symmetric_sqrt(cond_m.sigma22_1) @ cond_m.lam2_1
        # tau_tilde of the conditional, c12 * (tau + phi1~'(y - mu1)), linear in y
        tt0 = c12 * (cond_m.tau - cond_m.varphi1_tilde @ cond_m.mu1)
        tt1 = c12 * cond_m.varphi1_tilde
        em = a + b @ e1 + dm * r0
        emk = np.outer(a, e1) + b @ e2 + np.outer(dm, r1)
        ell = np.outer(a, a) + np.outer(a, b @ e1) + np.outer(b @ e1, a) + b @ e2 @ b.T
        zl = a * r0 + b @ r1
        zt = tt0 * r0 + tt1 @ r1
        emm = (cond_m.sigma22_1 + ell + np.outer(zl, dm) + np.outer(dm, zl)
               - zt * np.outer(dm, dm))
        w1 = np.empty(pc)
        w1[k_loc], w1[m_loc] = e1, em
        w2 = np.empty((pc, pc))
        w2[np.ix_(k_loc, k_loc)] = e2
        w2[np.ix_(m_loc, k_loc)] = emk
        w2[np.ix_(k_loc, m_loc)] = emk.T
        w2[np.ix_(m_loc, m_loc)] = emm
        # same normal probabilities, different eta: rescale to the full-block argument
        gamma_hat = r0 * math.sqrt((1.0 + marg.lam @ marg.lam) / (1.0 + cond.lam @ cond.lam))
        # W ~ TN(mu - tt*Delta, Gamma) with missing coordinates untruncated
        wmean = mu - cond.tau_tilde * cond.delta
        g = cond.gamma
        w0 = np.empty(pc)
        w0[k_loc] = g1[0]
        breg = np.linalg.solve(g[np.ix_(k_loc, k_loc)], g[np.ix_(k_loc, m_loc)]).T
        w0[m_loc] = wmean[m_loc] + breg @ (g1[0] - wmean[k_loc])
    y_hat, y2, y0 = _assemble(1, p, o, cens, y_o[None], w1[None], w2[None], w0[None])
    loglik = log_obs + math.log(norm_const)
    res = _finish(np.array([True]), terms, y_hat, y2, y0, np.array([gamma_hat]),
                  np.array([loglik]))
    return _single(sample, res)


def msnc_loglik(data, params: EsnParams) -> float:
    """Observed-data log-likelihood of the single-component model.

    Raises
    ------
    DegenerateRegionError
        If some row has zero probability.
    """
    data = as_data(data)
    return float(row_loglik(data, params).sum())


def row_loglik(data, params: EsnParams, strict=True):
    """Per-row log-likelihood ``log f(observed part of row i)``."""
    data = as_data(data)
    n, p = data.n, data.p
    out = np.empty(n)
    patterns, inverse = np.unique(data.censored, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == g)
        c = np.flatnonzero(pattern)
        o = np.flatnonzero(~pattern)
        if c.size == 0:
            y = data.values[rows]
            out[rows] = (LOG2 + mvn_logpdf(y, params.mu, params.sigma)
                         + log_ndtr((y - params.mu) @ params.varphi))
            continue
        if o.size == 0:
            prob = esn_rect_prob(data.lower[rows], data.upper[rows], params)
            with np.errstate(divide="ignore"):
                out[rows] = np.log(prob)
            continue
        cond = _Conditional.build(params, o, c)
        y_o = data.values[np.ix_(rows, o)]
        mu_co, tau_co = cond.locate(params, y_o)
        tau_t = cond.c_oc * tau_co
        lo = np.column_stack([data.lower[np.ix_(rows, c)] - mu_co, -tau_t])
        hi = np.column_stack([data.upper[np.ix_(rows, c)] - mu_co, np.full(rows.size, np.inf)])
        joint = rect_prob(lo, hi, augmented_cov(cond.sigma_cc_o, cond.delta_co))
        with np.errstate(divide="ignore"):
            out[rows] = (LOG2 + mvn_logpdf(y_o, params.mu[o], params.sigma[np.ix_(o, o)])
                         + np.log(joint))
    if strict and not np.isfinite(out).all():
        raise DegenerateRegionError(f"row {np.flatnonzero(~np.isfinite(out))[0]} has zero "
                                    "probability")
    return out


def floor_eigen(m, rel=EIG_FLOOR):
    """Symmetrize and lift eigenvalues to at least ``rel * trace / p``."""
    m = (m + m.T) / 2
    p = m.shape[0]
    floor = rel * max(np.trace(m), 0.0) / p
    w, v = np.linalg.eigh(m)
    if w.min() >= floor and floor > 0:
        return m
    floor = max(floor, 1e-300)
    m = (v * np.maximum(w, floor)) @ v.T
    return (m + m.T) / 2


def weighted_sums(stats: EStepBatch, weights=None):
    """Weighted sums ``(sZ, E1, E2, E3, E4, E5)`` of the E-step quantities."""
    n = stats.t_hat.shape[0]
    z = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    ok = z > 0
    z = np.where(ok, z, 0.0)
    e1 = z[ok] @ stats.y_hat[ok]
    e2 = np.einsum("n,nij->ij", z[ok], stats.y2_hat[ok])
    e3 = z[ok] @ stats.ty_hat[ok]
    e4 = float(z[ok] @ stats.t2_hat[ok])
    e5 = float(z[ok] @ stats.t_hat[ok])
    return float(z.sum()), e1, e2, e3, e4, e5


def cm_location_skewness(sums, delta_prev):
    """Conditional maximization of ``mu`` (old ``Delta``) then ``Delta`` (new ``mu``)."""
    sz, e1, _, e3, e4, e5 = sums
    mu = (e1 - e5 * delta_prev) / sz
    if not e4 > 0:
        raise NumericalError("sum of E[T^2] is not positive")
    delta = (e3 - e5 * mu) / e4
    return mu, delta


def gamma_bracket(sums, mu, delta):
    """Unnormalized Gamma update at ``(mu, delta)``: sum of the expected residual outer products."""
    sz, e1, e2, e3, e4, e5 = sums
    g = (e2 + sz * np.outer(mu, mu) + e4 * np.outer(delta, delta)
         - np.outer(mu, e1) - np.outer(e1, mu) - np.outer(e3, delta) - np.outer(delta, e3)
         + e5 * (np.outer(delta, mu) + np.outer(mu, delta)))
    return (g + g.T) / 2


def m_step(stats, delta_prev, weights=None, fix_delta_zero=False):
    """CM updates of ``(mu, Delta, Gamma)`` from E-step quantities.

    Parameters
    ----------
    stats : EStepBatch or sequence of EStepStats
    delta_prev : ndarray
        ``Delta`` from the previous iteration (used in the ``mu`` update).
    weights : ndarray, optional
        Row weights (posterior memberships in the mixture case).
    fix_delta_zero : bool
        Keep ``Delta = 0`` (normal family).

    Returns
    -------
    mu, delta, gamma : ndarray
    """
    if not isinstance(stats, EStepBatch):
        stats = EStepBatch.stack(stats)
    sums = weighted_sums(stats, weights)
    if fix_delta_zero:
        delta_prev = np.zeros_like(sums[1])
        mu = sums[1] / sums[0]
        delta = delta_prev
    else:
        mu, delta = cm_location_skewness(sums, delta_prev)
    gamma = floor_eigen(gamma_bracket(sums, mu, delta) / sums[0])
    return mu, delta, gamma


def recover_sn_params(mu, delta, gamma) -> EsnParams:
    """Map ``(mu, Delta, Gamma)`` back to ``(mu, Sigma, lambda)``.

    Raises
    ------
    BoundaryError
        If ``Delta' Sigma^{-1} Delta >= 1``.
    """
    mu = np.asarray(mu, dtype=float)
    delta = np.asarray(delta, dtype=float)
    sigma = np.asarray(gamma, dtype=float) + np.outer(delta, delta)
    sigma = (sigma + sigma.T) / 2
    inv_root = inv_symmetric_sqrt(sigma)
    q = float(delta @ np.linalg.solve(sigma, delta))
    if q >= 1.0:
        raise BoundaryError(f"Delta' Sigma^-1 Delta = {q:.6g} >= 1")
    lam = inv_root @ delta / math.sqrt(1.0 - q)
    return EsnParams(mu, sigma, lam, 0.0)


@dataclass
class EMConfig:
    """Settings shared by the EM drivers.

    ``screen_signs`` (mixtures only): before the main run, try skewness sign
    patterns around the k-means start for ``screen_iter`` iterations each (all
    patterns if there are at most ``screen_max``, otherwise a seeded random
    subset of that size) and continue from the best one.
    """

    tol: float = 1e-6
    max_iter: int = 500
    family: str = "skew"          # "skew" or "normal"
    shared_gamma: bool = False
    n_starts: int = 1
    seed: int = 0
    compute_se: bool = False
    screen_signs: bool = True
    screen_iter: int = 10
    screen_max: int = 16

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.family not in ("skew", "normal"):
            raise ValueError("family must be 'skew' or 'normal'")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


def converged(prev, cur, tol) -> bool:
    """Relative log-likelihood change ``|l_new / l_old - 1| < tol``."""
    if prev == 0.0:
        return abs(cur - prev) < tol
    return abs(cur / prev - 1.0) < tol


@dataclass
class MsncFit:
    """Result of a single-component fit."""

    params: EsnParams
    loglik_trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


def fit_msnc(data, init: EsnParams, config: EMConfig | None = None) -> MsncFit:
    """EM fit of one skew-normal (or, with ``family='normal'``, normal) component.

    The log-likelihood trace holds ``l(theta_k)`` for every visited parameter;
    the returned parameters are those of the last trace entry.
    """
    config = config or EMConfig()
    data = as_data(data)
    normal = config.family == "normal"
    params = EsnParams.normal(init.mu, init.sigma) if normal else init
    trace = []
    done = False
    it = 0
    while True:
        stats = component_e_step(data, params)
        trace.append(float(stats.loglik.sum()))
        if len(trace) > 1 and converged(trace[-2], trace[-1], config.tol):
            done = True
            break
        if it >= config.max_iter:
            break
        mu, delta, gamma = m_step(stats, params.delta, fix_delta_zero=normal)
        params = EsnParams.normal(mu, gamma) if normal else recover_sn_params(mu, delta, gamma)
        it += 1
    monitor.notify(trace, "fit_msnc")
    return MsncFit(params, trace, done, it)


# Normal-family censored EM with its own E-step (no latent T).


def normal_e_step(data, mu, sigma, strict=True):
    """Conditional moments ``(y_hat, y2_hat, loglik)`` under ``N(mu, sigma)``."""
    data = as_data(data)
    n, p = data.n, data.p
    y_hat = np.zeros((n, p))
    y2 = np.zeros((n, p, p))
    ll = np.full(n, -np.inf)
    patterns, inverse = np.unique(data.censored, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == g)
        c = np.flatnonzero(pattern)
        o = np.flatnonzero(~pattern)
        if c.size == 0:
            y = data.values[rows]
            y_hat[rows] = y
            y2[rows] = np.einsum("ni,nj->nij", y, y)
            ll[rows] = mvn_logpdf(y, mu, sigma)
            continue
        if o.size:
            y_o = data.values[np.ix_(rows, o)]
            reg = np.linalg.solve(sigma[np.ix_(o, o)], sigma[np.ix_(o, c)]).T
            mc = mu[c] + (y_o - mu[o]) @ reg.T
            sc = sigma[np.ix_(c, c)] - reg @ sigma[np.ix_(o, c)]
            base = mvn_logpdf(y_o, mu[o], sigma[np.ix_(o, o)])
        else:
            y_o = np.zeros((rows.size, 0))
            mc = np.broadcast_to(mu, (rows.size, p))
            sc = sigma
            base = np.zeros(rows.size)
        prob, w1, w2 = tn_moments_batch(data.lower[np.ix_(rows, c)], data.upper[np.ix_(rows, c)],
                                        mc, (sc + sc.T) / 2, strict=False)
        ok = prob >= MIN_PROB
        w1 = np.where(ok[:, None], w1, 0.0)
        w2 = np.where(ok[:, None, None], w2, 0.0)
        a, b, _ = _assemble(rows.size, p, o, c, y_o, w1, w2, w1)
        y_hat[rows], y2[rows] = a, b
        with np.errstate(divide="ignore"):
            ll[rows] = np.where(ok, base + np.log(np.maximum(prob, 1e-320)), -np.inf)
    if strict and not np.isfinite(ll).all():
        raise DegenerateRegionError(f"row {np.flatnonzero(~np.isfinite(ll))[0]} has zero "
                                    "probability")
    return y_hat, y2, ll


def normal_m_step(y_hat, y2, weights=None):
    n = y_hat.shape[0]
    z = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sz = z.sum()
    mu = z @ y_hat / sz
    s = np.einsum("n,nij->ij", z, y2) / sz - np.outer(mu, mu)
    return mu, floor_eigen(s)


def fit_mnc(data, mu, sigma, config: EMConfig | None = None) -> MsncFit:
    """Censored-normal EM (the ``lambda = 0`` model) with its own E-step."""
    config = config or EMConfig(family="normal")
    data = as_data(data)
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    trace = []
    done = False
    it = 0
    while True:
        y_hat, y2, ll = normal_e_step(data, mu, sigma)
        trace.append(float(ll.sum()))
        if len(trace) > 1 and converged(trace[-2], trace[-1], config.tol):
            done = True
            break
        if it >= config.max_iter:
            break
        mu, sigma = normal_m_step(y_hat, y2)
        it += 1
    monitor.notify(trace, "fit_mnc")
    return MsncFit(EsnParams.normal(mu, sigma), trace, done, it)


__all__ = [
    "CensoredSample", "CensoredData", "EStepStats", "EStepBatch", "EMConfig", "MsncFit",
    "component_e_step", "e_step", "e_step_observed", "e_step_censored", "e_step_mixed",
    "split_missing_censored", "msnc_loglik", "row_loglik", "m_step", "recover_sn_params",
    "fit_msnc", "fit_mnc", "normal_e_step", "normal_m_step", "floor_eigen",
]
