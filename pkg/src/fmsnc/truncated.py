"""Moments of truncated normal and truncated extended skew-normal laws.

Truncated-normal moments use the boundary-density recurrence: with
``X ~ N(0, S)`` restricted to ``[a, b]``, first and second moments are sums
of one- and two-coordinate boundary densities, each weighted by a normal
rectangle probability of the remaining coordinates.  Coordinates that are
not truncated at all (both bounds infinite) are handled by Gaussian
regression on the truncated block, so the recurrence only ever runs in the
dimension of the truly truncated coordinates.

Truncated ESN moments reuse the same kernel on the ``(p+1)``-dimensional
normal vector ``(Y, T0)`` with ``T0`` restricted to ``(-tau_tilde, inf)``.
"""

from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from . import _mvnprob
from .distributions import LOG_2PI, EsnParams, esn_rvs
from .errors import DegenerateRegionError

MIN_PROB = 1e-300
MAX_EXACT_DIM = 8
MC_FALLBACK_DRAWS = 200_000


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned box ``{x : lower <= x <= upper}``; infinite bounds allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if np.isnan(lo).any() or np.isnan(hi).any():
            raise ValueError("rectangle bounds contain NaN")
        if (lo > hi).any():
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def whole_space(cls, p):
        return cls(np.full(p, -np.inf), np.full(p, np.inf))

    @property
    def p(self) -> int:
        return self.lower.size

    @property
    def untruncated(self):
        """Mask of coordinates with both bounds infinite."""
        return np.isneginf(self.lower) & np.isposinf(self.upper)

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass(frozen=True)
class MomentPair:
    """First moment and second raw moment of a (truncated) random vector."""

    mean: np.ndarray
    second: np.ndarray

    @property
    def cov(self):
        return self.second - np.outer(self.mean, self.mean)


class MomentCallCounter:
    """Records the size of every truncated-moment recurrence that is run.

    Each entry is ``(dimension, rows)``.  :attr:`evaluations` counts one
    evaluation per truncated coordinate per row, the unit of work the
    recurrence scales with.
    """

    def __init__(self):
        self.calls = []

    def record(self, dim, rows):
        self.calls.append((int(dim), int(rows)))

    @property
    def evaluations(self) -> int:
        return sum(d * n for d, n in self.calls)

    @property
    def max_dim(self) -> int:
        return max((d for d, _ in self.calls), default=0)


_COUNTERS: list[MomentCallCounter] = []


@contextlib.contextmanager
def count_moment_calls():
    """Context manager yielding a :class:`MomentCallCounter`."""
    counter = MomentCallCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _record(dim, rows):
    for c in _COUNTERS:
        c.record(dim, rows)


def _check_alpha(alpha, context=""):
    bad = np.flatnonzero(~(alpha >= MIN_PROB))
    if bad.size:
        raise DegenerateRegionError(
            f"truncation region has probability {alpha[bad[0]]:.3g} < {MIN_PROB:g}"
            f" (row {bad[0]}{context})")


def _normal_density(x, var):
    return np.exp(-0.5 * x * x / var) / np.sqrt(2.0 * np.pi * var)


def _recurrence(lo, hi, cov, strict=True):
    """Zero-mean truncated moments by the boundary-density recurrence.

    ``lo``/``hi`` are (n, d) bounds of ``X ~ N(0, cov)``; every coordinate
    is assumed to have at least one finite bound.  With ``strict=False``,
    rows whose probability is below ``MIN_PROB`` get NaN moments instead of
    raising.
    """
    n, d = lo.shape
    _record(d, n)
    alpha = _mvnprob.rect_prob(lo, hi, cov)
    if strict:
        _check_alpha(alpha)
    good = alpha >= MIN_PROB
    if not good.all():
        m1 = np.full((n, d), np.nan)
        m2 = np.full((n, d, d), np.nan)
        if good.any():
            _, g1, g2 = _recurrence_rows(lo[good], hi[good], cov, alpha[good])
            m1[good], m2[good] = g1, g2
        return alpha, m1, m2
    return _recurrence_rows(lo, hi, cov, alpha)


def _recurrence_rows(lo, hi, cov, alpha):
    n, d = lo.shape
    s = np.diag(cov)
    fa = np.zeros((n, d))
    fb = np.zeros((n, d))
    for k in range(d):
        rest = [j for j in range(d) if j != k]
        if rest:
            beta = cov[rest, k] / s[k]
            ccov = cov[np.ix_(rest, rest)] - np.outer(cov[rest, k], cov[rest, k]) / s[k]
        for bound, out in ((lo, fa), (hi, fb)):
            x = bound[:, k]
            fin = np.isfinite(x)
            if not fin.any():
                continue
            val = _normal_density(x[fin], s[k])
            if rest:
                shift = x[fin, None] * beta[None, :]
                val = val * _mvnprob.rect_prob(lo[fin][:, rest] - shift,
                                               hi[fin][:, rest] - shift, ccov)
            out[fin, k] = val / alpha[fin]
    m1 = (fa - fb) @ cov
    afa = np.where(np.isfinite(lo), lo, 0.0) * fa
    bfb = np.where(np.isfinite(hi), hi, 0.0) * fb
    w = (afa - bfb) / s
    m2 = cov[None, :, :] + np.einsum("ik,nk,jk->nij", cov, w, cov)
    if d >= 2:
        h = np.zeros((n, d, d))
        for k in range(d):
            for q in range(k + 1, d):
                rest = [j for j in range(d) if j not in (k, q)]
                pair = [k, q]
                s2 = cov[np.ix_(pair, pair)]
                det = s2[0, 0] * s2[1, 1] - s2[0, 1] ** 2
                inv = np.array([[s2[1, 1], -s2[0, 1]], [-s2[0, 1], s2[0, 0]]]) / det
                if rest:
                    beta = cov[np.ix_(rest, pair)] @ inv
                    ccov = cov[np.ix_(rest, rest)] - beta @ cov[np.ix_(pair, rest)]
                total = np.zeros(n)
                for xk_b, sk in ((lo, 1.0), (hi, -1.0)):
                    for xq_b, sq in ((lo, 1.0), (hi, -1.0)):
                        xk, xq = xk_b[:, k], xq_b[:, q]
                        fin = np.isfinite(xk) & np.isfinite(xq)
                        if not fin.any():
                            continue
                        xy = np.column_stack([xk[fin], xq[fin]])
                        quad = np.einsum("ni,ij,nj->n", xy, inv, xy)
                        val = np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det))
                        if rest:
                            shift = xy @ beta.T
                            val = val * _mvnprob.rect_prob(lo[fin][:, rest] - shift,
                                                           hi[fin][:, rest] - shift, ccov)
                        total[fin] += sk * sq * val / alpha[fin]
                h[:, k, q] = total
                h[:, q, k] = total
        m2 = m2 + np.einsum("ik,nkq,kqj->nij", cov, h, _a_tensor(cov))
    m2 = (m2 + np.transpose(m2, (0, 2, 1))) / 2
    return alpha, m1, m2


def _a_tensor(cov):
    s = np.diag(cov)
    # a[k, q, j] = cov[j, q] - cov[k, q] * cov[j, k] / cov[k, k]
    return cov.T[None, :, :] - cov[:, :, None] * cov[:, None, :] / s[:, None, None]


def _mc_zero_mean(lo, hi, cov, strict=True, seed=0):
    """Rejection-sampling fallback for high-dimensional truncation."""
    n, d = lo.shape
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov)
    alpha = np.empty(n)
    m1 = np.empty((n, d))
    m2 = np.empty((n, d, d))
    for i in range(n):
        z = rng.standard_normal((MC_FALLBACK_DRAWS, d)) @ chol.T
        keep = ((z >= lo[i]) & (z <= hi[i])).all(axis=1)
        if keep.sum() < 100:
            if strict:
                raise DegenerateRegionError(
                    f"Monte Carlo fallback accepted only {keep.sum()} draws (row {i})")
            alpha[i], m1[i], m2[i] = 0.0, np.nan, np.nan
            continue
        acc = z[keep]
        alpha[i] = keep.mean()
        m1[i] = acc.mean(axis=0)
        m2[i] = acc.T @ acc / acc.shape[0]
    return alpha, m1, m2


def _zero_mean_moments(lo, hi, cov, split=True, strict=True):
    """Dispatch on which coordinates are truncated; returns (alpha, m1, m2)."""
    n, d = lo.shape
    alpha = np.ones(n)
    m1 = np.zeros((n, d))
    m2 = np.broadcast_to(cov, (n, d, d)).copy()
    if n == 0:
        return alpha, m1, m2
    if not split:
        free = np.zeros((n, d), dtype=bool)
    else:
        free = np.isneginf(lo) & np.isposinf(hi)
    patterns, inverse = np.unique(free, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == g)
        t = np.flatnonzero(~pattern)
        u = np.flatnonzero(pattern)
        if t.size == 0:
            continue
        ctt = cov[np.ix_(t, t)]
        lo_t, hi_t = lo[np.ix_(rows, t)], hi[np.ix_(rows, t)]
        if t.size > MAX_EXACT_DIM:
            warnings.warn(f"truncation in dimension {t.size} > {MAX_EXACT_DIM}; "
                          "using a Monte Carlo estimate", RuntimeWarning, stacklevel=3)
            a_g, e1, e2 = _mc_zero_mean(lo_t, hi_t, ctt, strict)
        else:
            a_g, e1, e2 = _recurrence(lo_t, hi_t, ctt, strict)
        alpha[rows] = a_g
        m1[np.ix_(rows, t)] = e1
        m2[np.ix_(rows, t, t)] = e2
        if u.size:
            b = np.linalg.solve(ctt, cov[np.ix_(t, u)]).T
            s_u = cov[np.ix_(u, u)] - b @ cov[np.ix_(t, u)]
            m1[np.ix_(rows, u)] = e1 @ b.T
            ut = np.einsum("ij,njk->nik", b, e2)
            m2[np.ix_(rows, u, t)] = ut
            m2[np.ix_(rows, t, u)] = np.transpose(ut, (0, 2, 1))
            m2[np.ix_(rows, u, u)] = s_u[None] + np.einsum("nik,jk->nij", ut, b)
    return alpha, m1, m2


def tn_moments_batch(lower, upper, mean, cov, split=True, strict=True):
    """Truncated-normal moments for many rows sharing one covariance.

    Parameters
    ----------
    lower, upper : ndarray, shape (n, d)
    mean : ndarray, shape (n, d) or (d,)
    cov : ndarray, shape (d, d)
    split : bool
        Treat untruncated coordinates by Gaussian regression (default).
        ``False`` runs the recurrence over every coordinate.
    strict : bool
        Raise on rows with (numerically) zero probability; otherwise those
        rows get NaN moments.

    Returns
    -------
    prob : ndarray, shape (n,)
        Normal probability of each rectangle.
    m1 : ndarray, shape (n, d)
    m2 : ndarray, shape (n, d, d)
        Raw second moments.
    """
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    mean = np.broadcast_to(np.asarray(mean, dtype=float), lower.shape)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    alpha, x1, x2 = _zero_mean_moments(lower - mean, upper - mean, cov, split, strict)
    m1 = x1 + mean
    m2 = (x2 + np.einsum("ni,nj->nij", mean, x1) + np.einsum("ni,nj->nij", x1, mean)
          + np.einsum("ni,nj->nij", mean, mean))
    # guard the box constraint against rounding at tight rectangles
    m1 = np.clip(m1, lower, upper)
    return alpha, m1, m2


def tn_moments(rect: Rectangle, mu, sigma, split=True) -> MomentPair:
    """Moments of ``N(mu, sigma)`` truncated to ``rect``.

    Raises
    ------
    DegenerateRegionError
        If the rectangle probability is below ``1e-300``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.size != rect.p:
        raise ValueError("dimension mismatch between rectangle and mu")
    _, m1, m2 = tn_moments_batch(rect.lower[None], rect.upper[None], mu, sigma, split)
    return MomentPair(m1[0], m2[0])


def augmented_cov(sigma, delta):
    p = delta.size
    cov = np.empty((p + 1, p + 1))
    cov[:p, :p] = sigma
    cov[:p, p] = delta
    cov[p, :p] = delta
    cov[p, p] = 1.0
    return cov


def tesn_moments_batch(lower, upper, mu, sigma, delta, tau_tilde, split=True, strict=True):
    """Truncated ESN moments for rows sharing ``(sigma, delta)``.

    Location ``mu`` (n, p) and ``tau_tilde`` (n,) may vary by row.

    Returns
    -------
    norm_const : ndarray, shape (n,)
        ESN probability of each rectangle.
    m1, m2 : ndarray
        First and raw second moments of the truncated ESN.
    """
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    n, p = lower.shape
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n, p))
    tau_tilde = np.broadcast_to(np.asarray(tau_tilde, dtype=float), (n,))
    delta = np.asarray(delta, dtype=float)
    if not delta.any():
        return tn_moments_batch(lower, upper, mu, sigma, split, strict)
    lo = np.column_stack([lower - mu, -tau_tilde])
    hi = np.column_stack([upper - mu, np.full(n, np.inf)])
    alpha, x1, x2 = _zero_mean_moments(lo, hi, augmented_cov(sigma, delta), split, strict)
    with np.errstate(divide="ignore"):
        norm_const = np.exp(np.log(alpha) - log_ndtr(tau_tilde))
    y1 = x1[:, :p] + mu
    y2 = (x2[:, :p, :p] + np.einsum("ni,nj->nij", mu, x1[:, :p])
          + np.einsum("ni,nj->nij", x1[:, :p], mu) + np.einsum("ni,nj->nij", mu, mu))
    y1 = np.clip(y1, lower, upper)
    return norm_const, y1, y2


def tesn_moments(rect: Rectangle, params: EsnParams, split=True) -> MomentPair:
    """Moments of ``ESN(params)`` truncated to ``rect``."""
    if params.p != rect.p:
        raise ValueError("dimension mismatch between rectangle and params")
    _, m1, m2 = tesn_moments_batch(rect.lower[None], rect.upper[None], params.mu,
                                   params.sigma, params.delta, params.tau_tilde, split)
    return MomentPair(m1[0], m2[0])


def log_eta(tau, lam_sq):
    """``log(phi(tau; 0, 1 + lam'lam) / Phi(tau_tilde))``."""
    v = 1.0 + lam_sq
    tau = np.asarray(tau, dtype=float)
    return -0.5 * tau * tau / v - 0.5 * (LOG_2PI + np.log(v)) - log_ndtr(tau / np.sqrt(v))


def ratio_weighted_batch(lower, upper, mu, gamma, delta, tau, lam_sq, norm_const,
                         split=True, strict=True):
    """Batched ratio-weighted moments.

    Returns ``(r0, w1, w2)`` with ``r0 = eta * L / norm_const`` and ``w1``,
    ``w2`` the moments of ``W ~ TN(mu - tau_tilde * delta, gamma)`` on the
    rectangle, so that the weighted expectation of ``g(Y)`` equals
    ``r0 * E[g(W)]``.
    """
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    n, p = lower.shape
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (n,))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n, p))
    tau_tilde = tau / np.sqrt(1.0 + lam_sq)
    m = mu - tau_tilde[:, None] * np.asarray(delta)[None, :]
    prob, w1, w2 = tn_moments_batch(lower, upper, m, gamma, split, strict)
    with np.errstate(divide="ignore", invalid="ignore"):
        r0 = np.exp(log_eta(tau, lam_sq) + np.log(prob) - np.log(norm_const))
    # W has no usable moments when L underflows, but r0 * E[g(W)] is then
    # negligible, so the weighted contribution is zero
    tiny = ~(prob >= MIN_PROB)
    if tiny.any():
        r0, w1, w2 = r0.copy(), w1.copy(), w2.copy()
        r0[tiny], w1[tiny], w2[tiny] = 0.0, 0.0, 0.0
    return r0, w1, w2


def ratio_weighted_tn_moments(rect: Rectangle, params: EsnParams, g_order: int, split=True):
    """Expectation of ``g(Y) * zeta(A(Y))`` for ``Y ~ TESN(params; rect)``.

    Here ``zeta = phi / Phi`` and ``A(y) = tau + lambda' Sigma^{-1/2} (y - mu)``.
    The value is ``eta * L / norm_const * E[g(W)]`` with
    ``W ~ TN(mu - tau_tilde * Delta, Gamma; rect)``,
    ``eta = phi(tau; 0, 1 + lambda'lambda) / xi`` and ``L``, ``norm_const`` the
    normal and ESN probabilities of ``rect``.

    Parameters
    ----------
    g_order : {0, 1, 2}
        ``g = 1``, ``g(y) = y`` or ``g(y) = y y'``.
    """
    if g_order not in (0, 1, 2):
        raise ValueError("g_order must be 0, 1 or 2")
    norm_const, _, _ = tesn_moments_batch(rect.lower[None], rect.upper[None], params.mu,
                                          params.sigma, params.delta, params.tau_tilde,
                                          split)
    r0, w1, w2 = ratio_weighted_batch(rect.lower[None], rect.upper[None], params.mu,
                                      params.gamma, params.delta, params.tau,
                                      params.lam @ params.lam, norm_const, split)
    if g_order == 0:
        return float(r0[0])
    if g_order == 1:
        return r0[0] * w1[0]
    return r0[0] * w2[0]


@dataclass(frozen=True)
class OracleResult:
    """Rejection-sampling estimate of truncated moments."""

    moments: MomentPair
    mean_se: np.ndarray
    second_se: np.ndarray
    accepted: int
    acceptance_rate: float
    ratio: tuple | None = None  # (r0, r1, r2) estimates
    ratio_se: tuple | None = None


def mc_truncated_oracle(rect: Rectangle, params, n_draws: int, seed: int,
                        with_ratio=False, batch=200_000) -> OracleResult:
    """Monte Carlo estimate of truncated moments by rejection sampling.

    Parameters
    ----------
    rect : Rectangle
    params : EsnParams or tuple (mu, sigma)
        A tuple is read as a normal distribution.
    n_draws : int
        Number of accepted draws to collect (at least ``1e4``).
    seed : int
    with_ratio : bool
        Also estimate the ratio-weighted expectations for ``g`` of order
        0, 1, 2 (ESN parameters only).

    Raises
    ------
    DegenerateRegionError
        If the acceptance rate falls below ``1e-5``.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be at least 1e4")
    if not isinstance(params, EsnParams):
        mu, sigma = params
        params = EsnParams.normal(mu, sigma)
    rng = np.random.default_rng(seed)
    kept = []
    total = 0
    n_kept = 0
    while n_kept < n_draws:
        draws = esn_rvs(params, batch, rng)
        total += batch
        ok = ((draws >= rect.lower) & (draws <= rect.upper)).all(axis=1)
        kept.append(draws[ok])
        n_kept += int(ok.sum())
        if total >= 10 * batch and n_kept / total < 1e-5:
            raise DegenerateRegionError(
                f"oracle acceptance rate {n_kept / total:.2e} below 1e-5")
    x = np.concatenate(kept)[:n_draws]
    rate = n_kept / total
    if rate < 1e-5:
        raise DegenerateRegionError(f"oracle acceptance rate {rate:.2e} below 1e-5")
    outer = np.einsum("ni,nj->nij", x, x)
    root_n = np.sqrt(n_draws)
    res = dict(moments=MomentPair(x.mean(axis=0), outer.mean(axis=0)),
               mean_se=x.std(axis=0, ddof=1) / root_n,
               second_se=outer.std(axis=0, ddof=1) / root_n,
               accepted=n_draws, acceptance_rate=rate)
    if with_ratio:
        arg = params.tau + (x - params.mu) @ params.varphi
        zeta = np.exp(-0.5 * arg * arg - 0.5 * LOG_2PI - log_ndtr(arg))
        terms = (zeta, zeta[:, None] * x, zeta[:, None, None] * outer)
        res["ratio"] = tuple(t.mean(axis=0) for t in terms)
        res["ratio_se"] = tuple(t.std(axis=0, ddof=1) / root_n for t in terms)
    return OracleResult(**res)


__all__ = [
    "Rectangle", "MomentPair", "MomentCallCounter", "count_moment_calls",
    "tn_moments", "tn_moments_batch", "tesn_moments", "tesn_moments_batch",
    "ratio_weighted_tn_moments", "ratio_weighted_batch", "mc_truncated_oracle",
    "OracleResult", "augmented_cov", "log_eta",
]
