"""Simulation designs, imputation, accuracy metrics and Monte Carlo studies."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .censored import EMConfig
from .data import CensoredData, as_data
from .errors import FmsncError, NumericalError, StudyFailureError
from .mixture import MixtureModel, align_to, fit_fm_msnc, mixture_e_step

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.2


@dataclass(frozen=True)
class CensorScheme:
    """How censoring is injected into simulated data.

    ``kind`` is one of

    * ``"none"``;
    * ``"left_quantile"``: within each component and coordinate the smallest
      ``round(rate * n_j)`` values are censored to ``(-inf, limit]``, with
      ``limit`` the largest censored value;
    * ``"interval"``: ``bounds`` holds one ``(a, b)`` pair per coordinate and
      values falling in ``[a, b]`` are reported as that interval.
    """

    kind: str = "none"
    rate: float = 0.0
    bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("none", "left_quantile", "interval"):
            raise ValueError(f"unknown censoring scheme {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("censoring rate must lie in [0, 1)")
        if self.kind == "interval":
            if self.bounds is None:
                raise ValueError("interval censoring needs bounds")
            b = np.asarray(self.bounds, dtype=float)
            if b.ndim != 2 or b.shape[1] != 2 or (b[:, 0] > b[:, 1]).any():
                raise ValueError("bounds must be (a, b) pairs with a <= b")
            object.__setattr__(self, "bounds", tuple(map(tuple, b.tolist())))


@dataclass(frozen=True)
class MissingScheme:
    """``"none"`` or ``"mcar"``: each entry is masked independently with ``rate``."""

    kind: str = "none"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "mcar"):
            raise ValueError(f"unknown missingness scheme {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("missing rate must lie in [0, 1)")


@dataclass(frozen=True)
class SimulationDesign:
    """True model, sample size, censoring and missingness, and seed."""

    model: MixtureModel
    n: int
    censor_scheme: CensorScheme = field(default_factory=CensorScheme)
    missing_scheme: MissingScheme = field(default_factory=MissingScheme)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.censor_scheme.kind == "interval" and len(self.censor_scheme.bounds) != self.model.p:
            raise ValueError("need one interval per coordinate")

    def with_seed(self, seed) -> SimulationDesign:
        return SimulationDesign(self.model, self.n, self.censor_scheme, self.missing_scheme, seed)

    def with_n(self, n) -> SimulationDesign:
        return SimulationDesign(self.model, n, self.censor_scheme, self.missing_scheme, self.seed)


@dataclass
class Simulation:
    """Output of :func:`simulate`."""

    complete: np.ndarray
    data: CensoredData
    labels: np.ndarray

    @property
    def samples(self):
        return self.data.samples()

    def __iter__(self):
        return iter((self.complete, self.samples, self.labels))


def draw_mixture(model: MixtureModel, n, rng):
    """Draw ``n`` points and their component labels from a mixture."""
    labels = rng.choice(model.G, size=n, p=model.weights)
    t = np.abs(rng.standard_normal(n))
    z = rng.standard_normal((n, model.p))
    y = np.empty((n, model.p))
    for j, comp in enumerate(model.components):
        rows = labels == j
        w, v = np.linalg.eigh(comp.gamma)
        root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        y[rows] = comp.mu + np.outer(t[rows], comp.delta) + z[rows] @ root
    return y, labels


def simulate(design: SimulationDesign) -> Simulation:
    """Draw a censored and/or incomplete sample from the design's mixture.

    Each row picks a component by the weights and is generated as
    ``mu_j + Delta_j |T| + Gamma_j^{1/2} Z``.  Censoring is applied first and
    MCAR masking second (a masked entry becomes missing even if censored).
    """
    rng = np.random.default_rng(design.seed)
    model, n, p = design.model, design.n, design.model.p
    y, labels = draw_mixture(model, n, rng)
    cens = np.zeros((n, p), bool)
    lower = np.full((n, p), -np.inf)
    upper = np.full((n, p), np.inf)
    scheme = design.censor_scheme
    if scheme.kind == "left_quantile" and scheme.rate > 0:
        for j in range(model.G):
            rows = np.flatnonzero(labels == j)
            m = int(round(scheme.rate * rows.size))
            if m == 0:
                continue
            for k in range(p):
                order = rows[np.argsort(y[rows, k], kind="stable")]
                hit = order[:m]
                cens[hit, k] = True
                upper[hit, k] = y[order[m - 1], k]
    elif scheme.kind == "interval":
        b = np.asarray(scheme.bounds)
        inside = (y >= b[:, 0]) & (y <= b[:, 1])
        cens |= inside
        lower = np.where(inside, b[:, 0], lower)
        upper = np.where(inside, b[:, 1], upper)
    miss = design.missing_scheme
    if miss.kind == "mcar" and miss.rate > 0:
        mask = rng.random((n, p)) < miss.rate
        cens |= mask
        lower[mask] = -np.inf
        upper[mask] = np.inf
    return Simulation(y, CensoredData(y, cens, lower, upper), labels)


@dataclass
class Imputation:
    """Completed matrix and the mask of entries that were filled in."""

    completed: np.ndarray
    imputed: np.ndarray


def impute(data, model: MixtureModel, family="skew") -> Imputation:
    """Posterior-weighted conditional means of censored and missing entries.

    Censored entries get truncated conditional means, missing entries the
    conditional mean given the observed and censored parts; both are averaged
    over components with the posterior memberships.  Observed entries are
    returned unchanged.
    """
    data = as_data(data)
    out = data.values.copy()
    mask = data.censored.copy()
    if not mask.any():
        return Imputation(out, mask)
    mst = mixture_e_step(data, model, family)
    pred = sum(mst.z[:, [j]] * mst.stats[j].y_hat for j in range(model.G))
    if not np.isfinite(pred[mask]).all():
        raise NumericalError("non-finite imputed value")
    out[mask] = pred[mask]
    return Imputation(out, mask)


def mean_impute(data) -> Imputation:
    """Fill censored and missing entries with the observed column mean."""
    data = as_data(data)
    obs = np.where(data.censored, np.nan, data.values)
    with np.errstate(invalid="ignore"):
        col = np.nan_to_num(np.nanmean(np.where(np.isnan(obs).all(axis=0), 0.0, obs), axis=0))
    out = np.where(data.censored, col, data.values)
    return Imputation(out, data.censored.copy())


def mae(truth, predicted, mask) -> float:
    """Mean absolute error over the entries selected by ``mask``."""
    mask = np.asarray(mask, bool)
    m = mask.sum()
    if m == 0:
        return float("nan")
    return float(np.abs(np.asarray(truth)[mask] - np.asarray(predicted)[mask]).sum() / m)


def mare(truth, predicted, mask) -> float:
    """Mean absolute relative error over the entries selected by ``mask``."""
    mask = np.asarray(mask, bool)
    m = mask.sum()
    if m == 0:
        return float("nan")
    t = np.asarray(truth)[mask]
    return float(np.abs((t - np.asarray(predicted)[mask]) / t).sum() / m)


def classification_metrics(posterior, truth) -> float:
    """Correct classification rate maximized over relabelings.

    Parameters
    ----------
    posterior : ndarray, shape (n, G) or (n,)
        Posterior memberships (assigned by their argmax) or hard labels.
    truth : ndarray of int, shape (n,)
    """
    posterior = np.asarray(posterior)
    pred = posterior.argmax(axis=1) if posterior.ndim == 2 else posterior.astype(int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError("posterior and labels differ in length")
    if truth.size == 0:
        raise ValueError("no labels")
    g = int(max(pred.max(), truth.max()) + 1)
    if posterior.ndim == 2:
        g = max(g, posterior.shape[1])
    table = np.zeros((g, g))
    np.add.at(table, (pred, truth), 1)
    if g <= 6:
        best = max(sum(table[k, perm[k]] for k in range(g))
                   for perm in itertools.permutations(range(g)))
    else:
        r, c = linear_sum_assignment(-table)
        best = table[r, c].sum()
    return float(best / truth.size)


def table_vector(model: MixtureModel):
    """Per-component ``(mu, vech Sigma^{1/2}, lambda, pi)`` and matching labels."""
    p = model.p
    iu = np.triu_indices(p)
    vals, labels = [], []
    for j, (c, w) in enumerate(zip(model.components, model.weights), start=1):
        vals += [c.mu, c.sqrt_sigma[iu], c.lam, [w]]
        labels += [f"mu{j}_{i + 1}" for i in range(p)]
        labels += [f"alpha{j}_{k + 1}{l + 1}" for k, l in zip(*iu)]
        labels += [f"lambda{j}_{i + 1}" for i in range(p)]
        labels.append(f"pi{j}")
    return np.concatenate(vals), labels


@dataclass
class AccuracyReport:
    """Aggregate of a Monte Carlo study.

    ``mae``/``mare``/``ccr`` average the per-replicate values (NaN when not
    applicable); ``bias`` and ``mse`` are the mean absolute and squared
    deviations of each entry of :func:`table_vector` from the truth.
    """

    mae: float
    mare: float
    ccr: float
    bias: np.ndarray
    mse: np.ndarray
    labels: list
    truth: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    n_failed: int = 0
    mean_imputation_mae: float = float("nan")

    @property
    def mc_mean(self):
        return self.estimates.mean(axis=0)

    @property
    def mc_sd(self):
        return self.estimates.std(axis=0, ddof=1)

    @property
    def mean_se(self):
        if not self.std_errors.size:
            return np.full(self.truth.size, np.nan)
        # columns without any reported SE stay NaN
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.std_errors, axis=0)

    def to_dict(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]
        return {"mae": _f(self.mae), "mare": _f(self.mare), "ccr": _f(self.ccr),
                "mean_imputation_mae": _f(self.mean_imputation_mae),
                "n_replicates": int(self.estimates.shape[0]), "n_failed": self.n_failed,
                "parameters": self.labels, "truth": clean(self.truth),
                "mc_mean": clean(self.mc_mean), "mc_sd": clean(self.mc_sd),
                "mean_im_se": clean(self.mean_se), "bias": clean(self.bias),
                "mse": clean(self.mse)}


def _f(v):
    return None if v is None or not np.isfinite(v) else float(v)


def mc_study(design: SimulationDesign, n_replicates, config: EMConfig | None = None
             ) -> AccuracyReport:
    """Simulate, fit and summarize ``n_replicates`` datasets.

    Replicate ``r`` uses seed ``design.seed + r`` for simulation and the
    config's seed for initialization.  Fitted labels are aligned to the truth
    before computing bias and mse.

    Raises
    ------
    StudyFailureError
        If more than 20% of the replicate fits fail.
    """
    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    config = config or EMConfig()
    truth, labels = table_vector(design.model)
    est, ses, maes, mares, ccrs, mi = [], [], [], [], [], []
    failed = 0
    for r in range(n_replicates):
        sim = simulate(design.with_seed(design.seed + r))
        try:
            fit = fit_fm_msnc(sim.data, design.model.G, config)
        except (FmsncError, np.linalg.LinAlgError) as exc:
            failed += 1
            log.warning("replicate %d failed: %s", r, exc)
            if failed > MAX_FAILURE_SHARE * n_replicates:
                raise StudyFailureError(failed, r + 1) from exc
            continue
        perm = align_to(fit.model, design.model)
        model = fit.model.permuted(perm)
        vec, _ = table_vector(model)
        est.append(vec)
        se = np.full(vec.size, np.nan)
        if fit.std_errors is not None:
            lookup = dict(zip(fit.se_labels, fit.std_errors))
            for i, name in enumerate(labels):
                se[i] = lookup.get(_relabel(name, perm), np.nan)
        ses.append(se)
        ccrs.append(classification_metrics(fit.posterior, sim.labels))
        missing = sim.data.missing
        if missing.any():
            imp = impute(sim.data, fit.model, config.family)
            maes.append(mae(sim.complete, imp.completed, missing))
            mares.append(mare(sim.complete, imp.completed, missing))
            mi.append(mae(sim.complete, mean_impute(sim.data).completed, missing))
    est = np.array(est)
    if failed > MAX_FAILURE_SHARE * n_replicates:
        raise StudyFailureError(failed, n_replicates)
    dev = est - truth
    return AccuracyReport(
        mae=float(np.mean(maes)) if maes else float("nan"),
        mare=float(np.mean(mares)) if mares else float("nan"),
        ccr=float(np.mean(ccrs)), bias=np.abs(dev).mean(axis=0), mse=(dev ** 2).mean(axis=0),
        labels=labels, truth=truth, estimates=est, std_errors=np.array(ses), n_failed=failed,
        mean_imputation_mae=float(np.mean(mi)) if mi else float("nan"))


def _relabel(name, perm):
    """Label in the fitted model's numbering of an aligned-model parameter name."""
    for prefix in ("lambda", "alpha", "mu", "pi"):
        if name.startswith(prefix):
            rest = name[len(prefix):]
            j, _, tail = rest.partition("_")
            old = perm[int(j) - 1] + 1
            return f"{prefix}{old}" + (f"_{tail}" if tail else "")
    return name


def bias_mse_series(design: SimulationDesign, sizes, n_replicates, config=None):
    """:func:`mc_study` at each sample size in ``sizes``; returns ``{n: report}``."""
    return {int(n): mc_study(design.with_n(int(n)), n_replicates, config) for n in sizes}


__all__ = [
    "CensorScheme", "MissingScheme", "SimulationDesign", "Simulation", "simulate",
    "draw_mixture", "Imputation", "impute", "mean_impute", "mae", "mare",
    "classification_metrics", "table_vector", "AccuracyReport", "mc_study", "bias_mse_series",
]
