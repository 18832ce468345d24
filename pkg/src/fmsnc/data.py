"""Containers for interval-censored and missing multivariate data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CensoredSample:
    """One observation.

    Attributes
    ----------
    values : ndarray, shape (p,)
        Observed values; entries with ``censored`` set are ignored.
    censored : ndarray of bool, shape (p,)
        Censoring indicators (``True`` = censored or missing).
    lower, upper : ndarray, shape (p,)
        Interval bounds for censored entries; a missing entry has
        ``(-inf, inf)``.
    """

    values: np.ndarray
    censored: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float)).copy()
        c = np.atleast_1d(np.asarray(self.censored, dtype=bool)).copy()
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if not (v.shape == c.shape == lo.shape == hi.shape) or v.ndim != 1:
            raise ValueError("values, indicators and bounds must share one length")
        if (lo[c] > hi[c]).any():
            raise ValueError("censoring interval with lower > upper")
        if np.isnan(v[~c]).any():
            raise ValueError("observed entry is NaN")
        for name, arr in (("values", v), ("censored", c), ("lower", lo), ("upper", hi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def observed(cls, y):
        y = np.asarray(y, dtype=float)
        return cls(y, np.zeros(y.size, bool), np.full(y.size, -np.inf), np.full(y.size, np.inf))

    @property
    def p(self) -> int:
        return self.values.size

    @property
    def missing(self):
        return self.censored & np.isneginf(self.lower) & np.isposinf(self.upper)


@dataclass
class CensoredData:
    """Column-aligned arrays for ``n`` observations of dimension ``p``.

    For uncensored entries ``lower`` and ``upper`` are stored as ``-inf`` and
    ``+inf``; for censored entries ``values`` is NaN.
    """

    values: np.ndarray
    censored: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float)).copy()
        n, p = self.values.shape
        self.censored = np.asarray(self.censored, dtype=bool).reshape(n, p).copy()
        self.lower = np.asarray(self.lower, dtype=float).reshape(n, p).copy()
        self.upper = np.asarray(self.upper, dtype=float).reshape(n, p).copy()
        c = self.censored
        self.values[c] = np.nan
        self.lower[~c] = -np.inf
        self.upper[~c] = np.inf
        if np.isnan(self.values[~c]).any():
            raise ValueError("observed entries must be finite numbers")
        if (self.lower > self.upper).any():
            raise ValueError("censoring interval with lower > upper")

    @classmethod
    def from_complete(cls, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return cls(y, np.zeros(y.shape, bool), np.full(y.shape, -np.inf), np.full(y.shape, np.inf))

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        return cls(np.array([s.values for s in samples]),
                   np.array([s.censored for s in samples]),
                   np.array([s.lower for s in samples]),
                   np.array([s.upper for s in samples]))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def missing(self):
        return self.censored & np.isneginf(self.lower) & np.isposinf(self.upper)

    def __len__(self):
        return self.n

    def sample(self, i) -> CensoredSample:
        return CensoredSample(self.values[i], self.censored[i], self.lower[i], self.upper[i])

    def samples(self):
        return [self.sample(i) for i in range(self.n)]

    def subset(self, rows) -> CensoredData:
        rows = np.asarray(rows)
        return CensoredData(self.values[rows], self.censored[rows], self.lower[rows],
                            self.upper[rows])

    def fill_levels(self):
        """Replace censored entries by a representative level.

        One-sided intervals use their finite endpoint, two-sided intervals the
        midpoint, and missing entries the mean of the observed values of that
        column (zero if a column has no observed value).
        """
        y = self.values.copy()
        lo_f = np.isfinite(self.lower)
        hi_f = np.isfinite(self.upper)
        both = self.censored & lo_f & hi_f
        y[both] = 0.5 * (self.lower[both] + self.upper[both])
        only_lo = self.censored & lo_f & ~hi_f
        y[only_lo] = self.lower[only_lo]
        only_hi = self.censored & hi_f & ~lo_f
        y[only_hi] = self.upper[only_hi]
        miss = self.missing
        if miss.any():
            obs = np.where(self.censored, np.nan, self.values)
            with np.errstate(invalid="ignore"):
                col = np.nanmean(np.where(np.isnan(obs).all(axis=0), 0.0, obs), axis=0)
            col = np.nan_to_num(col)
            y[miss] = np.broadcast_to(col, y.shape)[miss]
        return y


def as_data(data) -> CensoredData:
    """Coerce a ``CensoredData``, list of samples, or complete array."""
    if isinstance(data, CensoredData):
        return data
    if isinstance(data, CensoredSample):
        return CensoredData.from_samples([data])
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], CensoredSample):
        return CensoredData.from_samples(data)
    return CensoredData.from_complete(data)
