"""Normal, skew-normal and extended skew-normal distributions.

The extended skew-normal ``ESN_p(mu, Sigma, lambda, tau)`` has density

    f(y) = phi_p(y; mu, Sigma) * Phi(tau + lambda' Sigma^{-1/2} (y - mu)) / Phi(tau_tilde)

with ``tau_tilde = tau / sqrt(1 + lambda' lambda)``; ``tau = 0`` gives the
skew-normal and ``lambda = 0`` the normal.  It has the stochastic
representation ``Y = mu + Delta * T0 + Gamma^{1/2} Z`` with ``T0`` a standard
normal truncated to ``(-tau_tilde, inf)``, which is what the sampler and the
truncated-moment code use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from . import _mvnprob
from .errors import SingularMatrixError

LOG_2PI = np.log(2.0 * np.pi)
SYM_TOL = 1e-10
PD_RTOL = 1e-12


def _check_symmetric(m, tol=SYM_TOL):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, np.abs(m).max(initial=0.0))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return m


def symmetric_sqrt(m):
    """Unique symmetric positive-definite square root of ``m``.

    Parameters
    ----------
    m : array_like, shape (p, p)
        Symmetric positive-definite matrix.

    Returns
    -------
    ndarray
        ``F`` with ``F @ F == m`` and ``F == F.T`` exactly.

    Raises
    ------
    ValueError
        If ``m`` is not symmetric.
    SingularMatrixError
        If an eigenvalue is at most ``1e-12`` times the largest one.
    """
    m = _check_symmetric(m)
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.size and w.min() <= PD_RTOL * max(w.max(), 0.0):
        raise SingularMatrixError(f"matrix is not positive definite (min eigenvalue {w.min():.3g})")
    f = (v * np.sqrt(w)) @ v.T
    return (f + f.T) / 2


def inv_symmetric_sqrt(m):
    """Inverse of :func:`symmetric_sqrt`, computed from the same eigensystem."""
    m = _check_symmetric(m)
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.size and w.min() <= PD_RTOL * max(w.max(), 0.0):
        raise SingularMatrixError(f"matrix is not positive definite (min eigenvalue {w.min():.3g})")
    f = (v / np.sqrt(w)) @ v.T
    return (f + f.T) / 2


def _cholesky(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("covariance matrix is not positive definite") from exc


@dataclass(frozen=True)
class EsnParams:
    """Parameters of one extended skew-normal component.

    ``tau = 0`` (the default) is the skew-normal case used by the mixture
    model.  Derived quantities are computed lazily and cached.
    """

    mu: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).copy()
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float)).copy()
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float)).copy()
        p = mu.size
        if sigma.shape != (p, p) or lam.shape != (p,):
            raise ValueError(f"inconsistent shapes: mu {mu.shape}, sigma {sigma.shape}, "
                             f"lambda {lam.shape}")
        _check_symmetric(sigma)
        sigma = (sigma + sigma.T) / 2
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise SingularMatrixError("sigma is not positive definite")
        for name, arr in (("mu", mu), ("sigma", sigma), ("lam", lam)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tau", float(self.tau))

    @classmethod
    def normal(cls, mu, sigma):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return cls(mu, sigma, np.zeros(mu.size), 0.0)

    @classmethod
    def from_delta_gamma(cls, mu, delta, gamma, tau=0.0):
        """Build from the convolution parameters ``(mu, Delta, Gamma)``."""
        from .censored import recover_sn_params

        p = recover_sn_params(mu, delta, gamma)
        return cls(p.mu, p.sigma, p.lam, tau)

    @property
    def p(self) -> int:
        return self.mu.size

    @cached_property
    def sqrt_sigma(self):
        return symmetric_sqrt(self.sigma)

    @cached_property
    def inv_sqrt_sigma(self):
        return inv_symmetric_sqrt(self.sigma)

    @cached_property
    def varphi(self):
        """``Sigma^{-1/2} lambda``."""
        return self.inv_sqrt_sigma @ self.lam

    @cached_property
    def delta(self):
        return self.sqrt_sigma @ self.lam / np.sqrt(1.0 + self.lam @ self.lam)

    @cached_property
    def gamma(self):
        g = self.sigma - np.outer(self.delta, self.delta)
        return (g + g.T) / 2

    @cached_property
    def tau_tilde(self) -> float:
        return self.tau / np.sqrt(1.0 + self.lam @ self.lam)

    @cached_property
    def xi(self) -> float:
        return float(ndtr(self.tau_tilde))

    @property
    def is_normal(self) -> bool:
        return not self.lam.any() and self.tau == 0.0

    def with_tau(self, tau):
        return EsnParams(self.mu, self.sigma, self.lam, tau)


@dataclass(frozen=True)
class Partition:
    """Observed/censored split of the coordinates ``0..p-1`` with blocks of one component."""

    observed_idx: np.ndarray
    censored_idx: np.ndarray
    params: EsnParams = field(repr=False)

    def __post_init__(self):
        o = np.asarray(self.observed_idx, dtype=int)
        c = np.asarray(self.censored_idx, dtype=int)
        p = self.params.p
        if np.intersect1d(o, c).size or np.union1d(o, c).size != p or len(o) + len(c) != p:
            raise ValueError("observed and censored indices must partition 0..p-1")
        object.__setattr__(self, "observed_idx", o)
        object.__setattr__(self, "censored_idx", c)

    @classmethod
    def from_mask(cls, censored_mask, params):
        censored_mask = np.asarray(censored_mask, dtype=bool)
        return cls(np.flatnonzero(~censored_mask), np.flatnonzero(censored_mask), params)

    def _block(self, m, rows, cols):
        return m[np.ix_(rows, cols)]

    @property
    def mu_o(self):
        return self.params.mu[self.observed_idx]

    @property
    def mu_c(self):
        return self.params.mu[self.censored_idx]

    @property
    def sigma_oo(self):
        return self._block(self.params.sigma, self.observed_idx, self.observed_idx)

    @property
    def sigma_oc(self):
        return self._block(self.params.sigma, self.observed_idx, self.censored_idx)

    @property
    def sigma_co(self):
        return self._block(self.params.sigma, self.censored_idx, self.observed_idx)

    @property
    def sigma_cc(self):
        return self._block(self.params.sigma, self.censored_idx, self.censored_idx)

    @property
    def lam_o(self):
        return self.params.lam[self.observed_idx]

    @property
    def lam_c(self):
        return self.params.lam[self.censored_idx]

    @property
    def varphi_o(self):
        return self.params.varphi[self.observed_idx]

    @property
    def varphi_c(self):
        return self.params.varphi[self.censored_idx]

    def assemble(self, x_o, x_c):
        """Put observed and censored pieces back in coordinate order."""
        x_o = np.asarray(x_o)
        out = np.empty(self.params.p, dtype=np.result_type(x_o, x_c))
        out[self.observed_idx] = x_o
        out[self.censored_idx] = x_c
        return out


def mvn_logpdf(y, mu, sigma):
    """Log density of ``N_p(mu, sigma)`` at each row of ``y``."""
    y = np.asarray(y, dtype=float)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if y.shape[-1] != mu.size or sigma.shape != (mu.size, mu.size):
        raise ValueError("dimension mismatch between y, mu and sigma")
    chol = _cholesky(sigma)
    z = np.linalg.solve(chol, (y - mu).reshape(-1, mu.size).T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * (mu.size * LOG_2PI + logdet + (z * z).sum(axis=0))
    return out.reshape(y.shape[:-1]) if y.ndim > 1 else float(out[0])


def mvn_pdf(y, mu, sigma):
    return np.exp(mvn_logpdf(y, mu, sigma))


def _as_bounds(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("bounds have different shapes")
    if a.shape[-1:] == (0,) or a.ndim == 0:
        raise ValueError("rectangle must have at least one dimension")
    if (a > b).any():
        raise ValueError("lower bound exceeds upper bound")
    return a, b


def mvn_rect_prob(a, b, mu, sigma):
    """``P(a <= Y <= b)`` for ``Y ~ N(mu, sigma)``.

    ``a`` and ``b`` may be vectors or ``(n, p)`` arrays of bounds sharing the
    same distribution; infinite entries are allowed.
    """
    a, b = _as_bounds(a, b)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if a.shape[-1] != mu.size:
        raise ValueError("dimension mismatch between bounds and mu")
    single = a.ndim == 1
    out = _mvnprob.rect_prob(np.atleast_2d(a) - mu, np.atleast_2d(b) - mu, sigma)
    return float(out[0]) if single else out


def esn_logpdf(y, params: EsnParams):
    """Log density of the extended skew-normal at each row of ``y``."""
    y = np.asarray(y, dtype=float)
    base = mvn_logpdf(y, params.mu, params.sigma)
    arg = params.tau + (y - params.mu) @ params.varphi
    return base + log_ndtr(arg) - log_ndtr(params.tau_tilde)


def esn_pdf(y, params: EsnParams):
    return np.exp(esn_logpdf(y, params))


def _omega(params: EsnParams):
    p = params.p
    om = np.empty((p + 1, p + 1))
    om[:p, :p] = params.sigma
    om[:p, p] = -params.delta
    om[p, :p] = -params.delta
    om[p, p] = 1.0
    return om


def esn_cdf(y, params: EsnParams):
    """``P(Y <= y)`` via one ``(p+1)``-dimensional normal orthant probability.

    Uses ``Phi_{p+1}((z, tau_tilde); 0, Omega) / Phi(tau_tilde)`` with
    ``z = y - mu`` and ``Omega = [[Sigma, -Delta], [-Delta', 1]]``.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    upper = np.column_stack([y2 - params.mu, np.full(y2.shape[0], params.tau_tilde)])
    lower = np.full_like(upper, -np.inf)
    prob = _mvnprob.rect_prob(lower, upper, _omega(params)) / params.xi
    prob = np.clip(prob, 0.0, 1.0)
    return float(prob[0]) if single else prob


def _augmented_rect_prob(a, b, params):
    # (Y, T0) jointly normal with cov [[Sigma, Delta], [Delta', 1]], T0 > -tau_tilde
    p = params.p
    cov = np.empty((p + 1, p + 1))
    cov[:p, :p] = params.sigma
    cov[:p, p] = params.delta
    cov[p, :p] = params.delta
    cov[p, p] = 1.0
    n = a.shape[0]
    lo = np.column_stack([a - params.mu, np.full(n, -params.tau_tilde)])
    hi = np.column_stack([b - params.mu, np.full(n, np.inf)])
    return _mvnprob.rect_prob(lo, hi, cov) / params.xi


def _corner_rect_prob(a, b, params):
    p = params.p
    total = np.zeros(a.shape[0])
    for mask in range(2 ** p):
        pick = np.array([(mask >> j) & 1 for j in range(p)], dtype=bool)
        corner = np.where(pick, a, b)
        dead = np.isneginf(corner).any(axis=1)
        val = np.zeros(a.shape[0])
        if not dead.all():
            val[~dead] = esn_cdf(corner[~dead], params)
        total += (-1) ** int(pick.sum()) * val
    return np.clip(total, 0.0, 1.0)


def esn_rect_prob(a, b, params: EsnParams, method="augmented"):
    """``P(a <= Y <= b)`` for ``Y ~ ESN(params)``.

    Parameters
    ----------
    method : {"augmented", "corners"}
        ``"augmented"`` evaluates one ``(p+1)``-dimensional normal rectangle
        with the latent coordinate restricted to ``(-tau_tilde, inf)``;
        ``"corners"`` uses inclusion-exclusion over ``2^p`` calls to
        :func:`esn_cdf`.  The two agree to the accuracy of the underlying
        normal probabilities.
    """
    a, b = _as_bounds(a, b)
    single = a.ndim == 1
    a2, b2 = np.atleast_2d(a), np.atleast_2d(b)
    if a2.shape[1] != params.p:
        raise ValueError("dimension mismatch between bounds and params")
    if method == "augmented":
        out = _augmented_rect_prob(a2, b2, params)
    elif method == "corners":
        out = _corner_rect_prob(a2, b2, params)
    else:
        raise ValueError(f"unknown method {method!r}")
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class ConditionalEsn:
    """Factory for the conditional law of block 2 given block 1."""

    idx1: np.ndarray
    idx2: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    regression: np.ndarray  # Sigma_21 Sigma_11^{-1}
    sigma22_1: np.ndarray
    lam2_1: np.ndarray
    varphi1_tilde: np.ndarray
    tau: float

    def __call__(self, y1) -> EsnParams:
        d = np.asarray(y1, dtype=float) - self.mu1
        return EsnParams(self.mu2 + self.regression @ d, self.sigma22_1, self.lam2_1,
                         self.tau + self.varphi1_tilde @ d)

    def location(self, y1):
        """Conditional location and shift for each row of ``y1`` (batched)."""
        d = np.atleast_2d(np.asarray(y1, dtype=float)) - self.mu1
        return self.mu2 + d @ self.regression.T, self.tau + d @ self.varphi1_tilde


def marginal_conditional_split(params: EsnParams, idx1: Sequence[int]):
    """Marginal of block 1 and conditional of block 2 given block 1.

    Parameters
    ----------
    params : EsnParams
    idx1 : sequence of int
        Coordinates of block 1; block 2 is the complement.

    Returns
    -------
    marginal : EsnParams
        ``ESN(mu1, Sigma11, c12 Sigma11^{1/2} varphi1_tilde, c12 tau)``.
    conditional : ConditionalEsn
        Callable mapping ``y1`` to the ``EsnParams`` of ``Y2 | Y1 = y1``.
    """
    p = params.p
    idx1 = np.asarray(idx1, dtype=int)
    idx2 = np.setdiff1d(np.arange(p), idx1)
    if idx1.size == 0 or idx2.size == 0:
        raise ValueError("both blocks must be nonempty")
    s = params.sigma
    s11 = s[np.ix_(idx1, idx1)]
    s12 = s[np.ix_(idx1, idx2)]
    s21 = s[np.ix_(idx2, idx1)]
    s22 = s[np.ix_(idx2, idx2)]
    try:
        reg = np.linalg.solve(s11, s12).T
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("Sigma_11 is singular") from exc
    s22_1 = s22 - reg @ s12
    s22_1 = (s22_1 + s22_1.T) / 2
    phi = params.varphi
    phi1, phi2 = phi[idx1], phi[idx2]
    phi1_tilde = phi1 + reg.T @ phi2
    c12 = 1.0 / np.sqrt(1.0 + phi2 @ s22_1 @ phi2)
    marginal = EsnParams(params.mu[idx1], s11, c12 * symmetric_sqrt(s11) @ phi1_tilde,
                         c12 * params.tau)
    lam2_1 = symmetric_sqrt(s22_1) @ phi2
    conditional = ConditionalEsn(idx1, idx2, params.mu[idx1], params.mu[idx2], reg, s22_1,
                                 lam2_1, phi1_tilde, params.tau)
    return marginal, conditional


def esn_rvs(params: EsnParams, size: int, rng=None):
    """Draw ``size`` samples through the convolution representation."""
    rng = np.random.default_rng(rng)
    p = params.p
    # T0 ~ N(0, 1) truncated to (-tau_tilde, inf) by inversion
    lo = ndtr(-params.tau_tilde)
    u = lo + (1.0 - lo) * rng.random(size)
    t0 = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    z = rng.standard_normal((size, p))
    w, v = np.linalg.eigh(params.gamma)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return params.mu + np.outer(t0, params.delta) + z @ root


def sn_mean(params: EsnParams):
    """Untruncated mean ``mu + Delta phi(tau_tilde) / Phi(tau_tilde)``."""
    tt = params.tau_tilde
    ratio = np.exp(-0.5 * tt * tt - 0.5 * LOG_2PI - log_ndtr(tt))
    return params.mu + params.delta * ratio


def sn_cov(params: EsnParams):
    """Untruncated covariance ``Sigma - ratio (tau_tilde + ratio) Delta Delta'``."""
    tt = params.tau_tilde
    ratio = np.exp(-0.5 * tt * tt - 0.5 * LOG_2PI - log_ndtr(tt))
    return params.sigma - ratio * (tt + ratio) * np.outer(params.delta, params.delta)


ConditionalFactory = Callable[[np.ndarray], EsnParams]
