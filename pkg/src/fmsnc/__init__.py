"""Finite mixtures of multivariate skew-normal distributions with censored data."""
