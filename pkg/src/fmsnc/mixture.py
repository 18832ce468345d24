"""Finite mixtures of skew-normal (or normal) components with censored data.

``fit_fm_msnc`` runs the ECM algorithm: responsibilities and per-component
conditional expectations in the E-step, then closed-form conditional updates
of the weights, locations, skewness directions and scale matrices.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from . import monitor
from .censored import (EMConfig, EStepBatch, cm_location_skewness, component_e_step,
                       converged, floor_eigen, gamma_bracket, normal_e_step, recover_sn_params,
                       weighted_sums)
from .data import as_data
from .distributions import EsnParams, symmetric_sqrt
from .errors import ComponentCollapseError, DegenerateRowError, FmsncError, NumericalError

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
MAX_RESEEDS = 10


@dataclass(frozen=True)
class MixtureModel:
    """Mixture weights and components (all with ``tau = 0``)."""

    weights: np.ndarray
    components: tuple
    shared_gamma: bool = False

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        comps = tuple(self.components)
        if w.size != len(comps) or w.size == 0:
            raise ValueError("need one weight per component")
        if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        if len({c.p for c in comps}) != 1:
            raise ValueError("components must share one dimension")
        if any(c.tau != 0.0 for c in comps):
            raise ValueError("mixture components must have tau = 0")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def G(self) -> int:
        return len(self.components)

    @property
    def p(self) -> int:
        return self.components[0].p

    @property
    def is_normal(self) -> bool:
        return all(not c.lam.any() for c in self.components)

    def permuted(self, perm) -> MixtureModel:
        perm = list(perm)
        return MixtureModel(self.weights[perm], [self.components[k] for k in perm],
                            self.shared_gamma)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "shared_gamma": self.shared_gamma,
            "components": [{"mu": c.mu.tolist(), "sigma": c.sigma.tolist(),
                            "lambda": c.lam.tolist()} for c in self.components],
        }

    @classmethod
    def from_dict(cls, d):
        comps = [EsnParams(c["mu"], c["sigma"], c["lambda"]) for c in d["components"]]
        return cls(np.asarray(d["weights"]) / np.sum(d["weights"]), comps,
                   bool(d.get("shared_gamma", False)))


@dataclass
class FitResult:
    """Outcome of :func:`fit_fm_msnc`."""

    model: MixtureModel
    loglik_trace: list
    posterior: np.ndarray
    criteria: dict
    n_params: int
    converged: bool
    iterations: int
    family: str = "skew"
    std_errors: np.ndarray | None = None
    se_labels: list | None = None
    start: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def labels(self):
        return self.posterior.argmax(axis=1)


def n_free_params(G, p, family="skew", shared_gamma=False) -> int:
    """Number of free parameters of a ``G``-component model in dimension ``p``."""
    k = (G - 1) + G * p
    if family == "skew":
        k += G * p
    k += p * (p + 1) // 2 if shared_gamma else G * p * (p + 1) // 2
    return k


def selection_criteria(loglik, n, rho) -> dict:
    """AIC, BIC and EDC: ``-2 loglik + rho * c_n`` with ``c_n = 2, log n, 0.2 sqrt(n)``."""
    base = -2.0 * loglik
    return {"AIC": base + 2.0 * rho, "BIC": base + rho * math.log(n),
            "EDC": base + rho * 0.2 * math.sqrt(n)}


def component_logliks(data, model: MixtureModel, family="skew"):
    """``log f_j(row i)`` for every row and component, ``-inf`` where impossible."""
    data = as_data(data)
    out = np.empty((data.n, model.G))
    for j, comp in enumerate(model.components):
        if family == "normal":
            out[:, j] = normal_e_step(data, comp.mu, comp.sigma, strict=False)[2]
        else:
            out[:, j] = component_e_step(data, comp, strict=False).loglik
    return out


def _posterior(logf, weights):
    joint = logf + np.log(weights)
    total = logsumexp(joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(total))
    if bad.size:
        raise DegenerateRowError(int(bad[0]))
    z = np.exp(joint - total[:, None])
    return z / z.sum(axis=1, keepdims=True), total


def responsibilities(data, model: MixtureModel, family="skew"):
    """Posterior membership probabilities (rows sum to one)."""
    return _posterior(component_logliks(data, model, family), model.weights)[0]


def mixture_row_loglik(data, model: MixtureModel, family="skew"):
    """Per-row mixture log-likelihood."""
    logf = component_logliks(data, model, family)
    return logsumexp(logf + np.log(model.weights), axis=1)


def mixture_loglik(data, model: MixtureModel, family="skew") -> float:
    return float(mixture_row_loglik(data, model, family).sum())


@dataclass
class MixtureStats:
    """E-step output: posterior ``z`` (n, G) and unweighted per-component moments.

    The weighted quantities ``E1..E5`` for row ``i`` and component ``j`` are
    ``z[i, j]`` times the fields of ``stats[j]``.
    """

    z: np.ndarray
    stats: list
    row_loglik: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.row_loglik.sum())

    def weighted(self, j):
        s, z = self.stats[j], self.z[:, j]
        return {"E1": z[:, None] * s.y_hat, "E2": z[:, None, None] * s.y2_hat,
                "E3": z[:, None] * s.ty_hat, "E4": z * s.t2_hat, "E5": z * s.t_hat}


def mixture_e_step(data, model: MixtureModel, family="skew") -> MixtureStats:
    """Responsibilities and per-component conditional expectations."""
    data = as_data(data)
    stats = []
    logf = np.empty((data.n, model.G))
    for j, comp in enumerate(model.components):
        if family == "normal":
            y_hat, y2, ll = normal_e_step(data, comp.mu, comp.sigma, strict=False)
            n, p = y_hat.shape
            st = EStepBatch(y_hat, y2, np.zeros(n), np.zeros(n), np.zeros((n, p)), y_hat.copy(), ll)
        else:
            st = component_e_step(data, comp, strict=False)
        stats.append(st)
        logf[:, j] = st.loglik
    z, total = _posterior(logf, model.weights)
    return MixtureStats(z, stats, total)


def mixture_m_step(mstats: MixtureStats, model: MixtureModel, family="skew",
                   shared_gamma=None) -> MixtureModel:
    """Conditional-maximization updates from :func:`mixture_e_step` output.

    Raises
    ------
    ComponentCollapseError
        If some component has posterior mass at most ``p``.
    """
    shared = model.shared_gamma if shared_gamma is None else shared_gamma
    z = mstats.z
    n, G = z.shape
    p = model.p
    mass = z.sum(axis=0)
    for j in range(G):
        if mass[j] <= p:
            raise ComponentCollapseError(j, mass[j], p)
    weights = mass / n
    weights = weights / weights.sum()
    locs, deltas, brackets = [], [], []
    for j, comp in enumerate(model.components):
        sums = weighted_sums(mstats.stats[j], z[:, j])
        if family == "normal":
            mu = sums[1] / sums[0]
            delta = np.zeros(p)
        else:
            mu, delta = cm_location_skewness(sums, comp.delta)
        locs.append(mu)
        deltas.append(delta)
        brackets.append(gamma_bracket(sums, mu, delta))
    if shared:
        pooled = floor_eigen(sum(brackets) / n)
        gammas = [pooled] * G
    else:
        gammas = [floor_eigen(b / m) for b, m in zip(brackets, mass)]
    comps = []
    for mu, delta, gamma in zip(locs, deltas, gammas):
        if family == "normal":
            comps.append(EsnParams.normal(mu, gamma))
        else:
            comps.append(recover_sn_params(mu, delta, gamma))
    return MixtureModel(weights, comps, shared)


def _skew_sign(x):
    x = x - x.mean(axis=0)
    m3 = (x ** 3).mean(axis=0)
    return np.where(m3 < 0, -1.0, 1.0)


def _kmeans_labels(y, G, seed):
    n, p = y.shape
    for attempt in range(MAX_RESEEDS + 1):
        if G == 1:
            return np.zeros(n, dtype=int)
        labels = KMeans(n_clusters=G, n_init=10, random_state=seed + 7919 * attempt).fit(y).labels_
        if np.bincount(labels, minlength=G).min() > p:
            return labels
    raise FmsncError(f"k-means produced a cluster with <= {p} members in "
                     f"{MAX_RESEEDS + 1} attempts")


def _cluster_model(y, labels, lams, family, shared_gamma) -> MixtureModel:
    G = len(lams)
    n, p = y.shape
    weights = np.bincount(labels, minlength=G) / n
    comps = []
    for j in range(G):
        xj = y[labels == j]
        sigma = floor_eigen(np.atleast_2d(np.cov(xj.T)), 1e-6)
        lam = np.zeros(p) if family == "normal" else np.asarray(lams[j], dtype=float)
        comps.append(EsnParams(xj.mean(axis=0), sigma, lam))
    if shared_gamma:
        gamma = floor_eigen(sum(w * c.gamma for w, c in zip(weights, comps)), 1e-6)
        comps = [EsnParams.normal(c.mu, gamma) if family == "normal"
                 else recover_sn_params(c.mu, c.delta, gamma) for c in comps]
    return MixtureModel(weights, comps, shared_gamma)


def _kmeans_start(data, G, seed, family, shared_gamma):
    y = data.fill_levels()
    n, p = y.shape
    if n < G * (p + 1):
        raise ValueError(f"need at least G*(p+1) = {G * (p + 1)} rows, got {n}")
    labels = _kmeans_labels(y, G, seed)
    lams = [_skew_sign(y[labels == j]) for j in range(G)]
    return y, labels, lams


def init_kmeans(data, G, seed=0, family="skew", shared_gamma=False) -> MixtureModel:
    """Starting values from k-means on the data with censored entries filled in.

    Censored entries are replaced by their censoring level (finite endpoint,
    midpoint, or column mean for missing entries).  Weights are the cluster
    proportions, locations the cluster means, scale matrices the cluster
    covariances, and skewness ``+-1`` per coordinate following the sign of the
    cluster's sample skewness.

    Raises
    ------
    FmsncError
        If every attempt yields a cluster too small to estimate a covariance.
    """
    data = as_data(data)
    y, labels, lams = _kmeans_start(data, G, seed, family, shared_gamma)
    return _cluster_model(y, labels, lams, family, shared_gamma)


def _run_em(data, model, config: EMConfig):
    family = config.family
    trace = []
    done = False
    it = 0
    while True:
        mstats = mixture_e_step(data, model, family)
        trace.append(mstats.loglik)
        if len(trace) > 1 and converged(trace[-2], trace[-1], config.tol):
            done = True
            break
        if it >= config.max_iter:
            break
        model = mixture_m_step(mstats, model, family, config.shared_gamma)
        it += 1
    monitor.notify(trace, f"fit_fm_msnc(G={model.G}, family={family})")
    return model, trace, mstats, done, it


def _sign_patterns(base, screen_max, seed):
    """Sign patterns to screen; the k-means pattern always comes first."""
    base = np.asarray(base)
    k = base.size
    if 2 ** k <= screen_max:
        pats = [np.array(s, dtype=float) for s in itertools.product([-1.0, 1.0], repeat=k)]
        pats.sort(key=lambda s: not np.array_equal(s, base.ravel()))
    else:
        rng = np.random.default_rng(seed)
        pats = [base.ravel().astype(float)]
        pats += [rng.choice([-1.0, 1.0], size=k) for _ in range(screen_max - 1)]
    return [s.reshape(base.shape) for s in pats]


def _screened_start(data, G, seed, config: EMConfig):
    """Short runs from each sign pattern; returns the best (model, trace, iterations)."""
    y, labels, lams = _kmeans_start(data, G, seed, config.family, config.shared_gamma)
    if config.family == "normal" or not config.screen_signs:
        return _cluster_model(y, labels, lams, config.family, config.shared_gamma), [], 0
    short = replace(config, max_iter=config.screen_iter)
    best = None
    for signs in _sign_patterns(np.array(lams), config.screen_max, seed):
        model0 = _cluster_model(y, labels, list(signs), config.family, config.shared_gamma)
        try:
            model, trace, _, done, it = _run_em(data, model0, short)
        except NumericalError as exc:
            log.debug("sign pattern %s skipped: %s", signs.ravel(), exc)
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, it)
    if best is None:
        raise NumericalError("every sign pattern failed during screening")
    model, trace, it = best
    return model, trace[:-1], it


def fit_fm_msnc(data, G, config: EMConfig | None = None, init: MixtureModel | None = None
                ) -> FitResult:
    """Maximum-likelihood fit of a ``G``-component mixture by ECM.

    Parameters
    ----------
    data : CensoredData, list of CensoredSample, or array
    G : int
    config : EMConfig, optional
        ``n_starts`` k-means starts with seeds ``seed, seed+1, ...``; the fit
        with the largest final log-likelihood is returned.
    init : MixtureModel, optional
        Explicit starting model (overrides k-means; ``n_starts`` ignored).
    """
    config = config or EMConfig()
    data = as_data(data)
    if G < 1:
        raise ValueError("G must be at least 1")
    best = None
    errors = []
    starts = [init] if init is not None else [None] * config.n_starts
    for s, start in enumerate(starts):
        try:
            if start is None:
                model0, head, it0 = _screened_start(data, G, config.seed + s, config)
            else:
                model0, head, it0 = start, [], 0
                if config.family == "normal" and not model0.is_normal:
                    model0 = MixtureModel(model0.weights, [EsnParams.normal(c.mu, c.sigma)
                                                           for c in model0.components],
                                          config.shared_gamma)
            model, trace, mstats, done, it = _run_em(data, model0, config)
            res = (model, head + trace, mstats, done, it0 + it)
        except (NumericalError, FmsncError) as exc:
            log.info("start %d failed: %s", s, exc)
            errors.append(exc)
            continue
        if best is None or res[1][-1] > best[0][1][-1]:
            best = (res, s)
    if best is None:
        raise errors[-1]
    (model, trace, mstats, done, it), s = best
    rho = n_free_params(G, data.p, config.family, config.shared_gamma)
    result = FitResult(model, trace, mstats.z, selection_criteria(trace[-1], data.n, rho), rho,
                       done, it, config.family, start=s)
    if config.compute_se:
        try:
            se, labels, _ = empirical_info_se(data, model, config.family)
            result.std_errors, result.se_labels = se, labels
        except (NumericalError, np.linalg.LinAlgError) as exc:
            log.warning("standard errors unavailable: %s", exc)
    return result


# Parameter vectors and scores.


def _vech_index(p):
    return list(zip(*np.triu_indices(p)))


def _unit(p, k, l):
    e = np.zeros((p, p))
    e[k, l] = 1.0
    e[l, k] = 1.0
    return e


def param_labels(G, p, family="skew", shared_gamma=False):
    """Names of the entries of :func:`pack` in order."""
    vech = _vech_index(p)
    labels = [f"mu{j + 1}_{i + 1}" for j in range(G) for i in range(p)]
    if family == "skew" and shared_gamma:
        labels += [f"delta{j + 1}_{i + 1}" for j in range(G) for i in range(p)]
        labels += [f"gamma_{k + 1}{l + 1}" for k, l in vech]
    elif shared_gamma:
        labels += [f"sigma_{k + 1}{l + 1}" for k, l in vech]
    else:
        labels += [f"alpha{j + 1}_{k + 1}{l + 1}" for j in range(G) for k, l in vech]
        if family == "skew":
            labels += [f"lambda{j + 1}_{i + 1}" for j in range(G) for i in range(p)]
    labels += [f"pi{j + 1}" for j in range(G - 1)]
    return labels


def pack(model: MixtureModel, family="skew"):
    """Parameter vector in the ordering used by :func:`score_vectors`.

    Unshared: ``(mu_j, vech F_j, lambda_j, pi_1..pi_{G-1})`` with ``F_j`` the
    symmetric root of ``Sigma_j`` (normal family drops ``lambda``).
    Shared: ``(mu_j, Delta_j, vech Gamma, pi)`` (normal: ``(mu_j, vech Sigma, pi)``).
    """
    p = model.p
    iu = np.triu_indices(p)
    parts = [c.mu for c in model.components]
    if model.shared_gamma:
        if family == "skew":
            parts += [c.delta for c in model.components]
            parts.append(model.components[0].gamma[iu])
        else:
            parts.append(model.components[0].sigma[iu])
    else:
        parts += [c.sqrt_sigma[iu] for c in model.components]
        if family == "skew":
            parts += [c.lam for c in model.components]
    parts.append(model.weights[:-1])
    return np.concatenate(parts)


def unpack(theta, G, p, family="skew", shared_gamma=False) -> MixtureModel:
    """Inverse of :func:`pack`."""
    theta = np.asarray(theta, dtype=float)
    iu = np.triu_indices(p)
    q = p * (p + 1) // 2
    pos = 0

    def take(k):
        nonlocal pos
        out = theta[pos:pos + k]
        pos += k
        return out

    def sym(v):
        m = np.zeros((p, p))
        m[iu] = v
        return m + np.triu(m, 1).T

    mus = [take(p) for _ in range(G)]
    comps = []
    if shared_gamma:
        if family == "skew":
            deltas = [take(p) for _ in range(G)]
            gamma = sym(take(q))
            comps = [recover_sn_params(m, d, gamma) for m, d in zip(mus, deltas)]
        else:
            sigma = sym(take(q))
            comps = [EsnParams.normal(m, sigma) for m in mus]
    else:
        fs = [sym(take(q)) for _ in range(G)]
        lams = [take(p) for _ in range(G)] if family == "skew" else [np.zeros(p)] * G
        comps = [EsnParams(m, f @ f, lam) for m, f, lam in zip(mus, fs, lams)]
    pis = take(G - 1)
    weights = np.append(pis, 1.0 - pis.sum())
    return MixtureModel(weights, comps, shared_gamma)


def score_vectors(data, model: MixtureModel, family="skew"):
    """Per-row scores of the observed-data log-likelihood, shape (n, k).

    Computed as conditional expectations of complete-data scores, which
    equal the observed-data score at any parameter value.
    """
    data = as_data(data)
    mst = mixture_e_step(data, model, family)
    n, G, p = data.n, model.G, model.p
    vech = _vech_index(p)
    skew = family == "skew"
    mu_blocks, scale_blocks, lam_blocks = [], [], []
    shared_scale = np.zeros((n, len(vech)))
    for j, comp in enumerate(model.components):
        w = mst.weighted(j)
        z = mst.z[:, j]
        mu = comp.mu
        delta = comp.delta if skew else np.zeros(p)
        gamma = comp.gamma if skew else comp.sigma
        ginv = np.linalg.inv(gamma)
        resid = w["E1"] - z[:, None] * mu - w["E5"][:, None] * delta
        mu_blocks.append(resid @ ginv)
        psi = (w["E2"] - np.einsum("i,nj->nij", mu, w["E1"]) - np.einsum("ni,j->nij", w["E1"], mu)
               - np.einsum("ni,j->nij", w["E3"], delta) - np.einsum("i,nj->nij", delta, w["E3"])
               + z[:, None, None] * np.outer(mu, mu)
               + w["E4"][:, None, None] * np.outer(delta, delta)
               + w["E5"][:, None, None] * (np.outer(delta, mu) + np.outer(mu, delta)))
        r = ginv @ psi @ ginv - z[:, None, None] * ginv
        v = (w["E3"] - w["E5"][:, None] * mu - w["E4"][:, None] * delta) @ ginv

        def block(gdot, ddot):
            return 0.5 * np.einsum("ij,nji->n", gdot, r) + v @ ddot

        if model.shared_gamma:
            if skew:
                lam_blocks.append(v)  # Delta_j block
            shared_scale += np.column_stack([0.5 * np.einsum("ij,nji->n", _unit(p, k, l), r)
                                             for k, l in vech])
            continue
        f = comp.sqrt_sigma
        lam = comp.lam
        s = 1.0 + lam @ lam
        dl = lam / math.sqrt(s)
        a = np.eye(p) - np.outer(dl, dl)
        cols = []
        for k, l in vech:
            fd = _unit(p, k, l)
            cols.append(block(fd @ a @ f + f @ a @ fd, fd @ dl))
        scale_blocks.append(np.column_stack(cols))
        if skew:
            cols = []
            for rr in range(p):
                e = np.zeros(p)
                e[rr] = 1.0
                ddl = (e * s - lam[rr] * lam) / s ** 1.5
                gd = -f @ (np.outer(ddl, dl) + np.outer(dl, ddl)) @ f
                cols.append(block(gd, f @ ddl))
            lam_blocks.append(np.column_stack(cols))
    parts = list(mu_blocks)
    if model.shared_gamma:
        parts += lam_blocks
        parts.append(shared_scale)
    else:
        parts += scale_blocks + lam_blocks
    pis = model.weights
    parts.append(mst.z[:, :-1] / pis[:-1] - (mst.z[:, -1] / pis[-1])[:, None])
    return np.column_stack(parts)


def empirical_info_se(data, model: MixtureModel, family="skew"):
    """Standard errors from the empirical information ``sum_i s_i s_i'``.

    Returns
    -------
    se : ndarray
    labels : list of str
    info : ndarray
    """
    scores = score_vectors(data, model, family)
    info = scores.T @ scores
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        warnings.warn(f"information matrix is ill-conditioned (cond={cond:.3g}); "
                      "using the pseudo-inverse", RuntimeWarning, stacklevel=2)
        cov = np.linalg.pinv(info)
    else:
        cov = np.linalg.inv(info)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return se, param_labels(model.G, model.p, family, model.shared_gamma), info


def align_to(model: MixtureModel, reference: MixtureModel):
    """Permutation of ``model``'s components closest to ``reference``.

    Distance is the summed Euclidean distance of the parameter vectors
    ``(mu, vech Sigma, lambda, pi)``; all ``G!`` permutations are searched.
    """
    def vec(c, w):
        iu = np.triu_indices(c.p)
        return np.concatenate([c.mu, c.sigma[iu], c.lam, [w]])

    ref = [vec(c, w) for c, w in zip(reference.components, reference.weights)]
    best, best_d = None, np.inf
    for perm in itertools.permutations(range(model.G)):
        d = sum(np.linalg.norm(vec(model.components[k], model.weights[k]) - ref[i])
                for i, k in enumerate(perm))
        if d < best_d:
            best, best_d = perm, d
    return list(best)


__all__ = [
    "MixtureModel", "FitResult", "n_free_params", "selection_criteria", "component_logliks",
    "responsibilities", "mixture_loglik", "mixture_row_loglik", "MixtureStats",
    "mixture_e_step", "mixture_m_step", "init_kmeans", "fit_fm_msnc", "pack", "unpack",
    "param_labels", "score_vectors", "empirical_info_se", "align_to", "symmetric_sqrt",
]
