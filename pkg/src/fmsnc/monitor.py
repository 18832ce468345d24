"""Hooks that observe every completed EM run (used for diagnostics and tests)."""

from __future__ import annotations

from typing import Callable

_LISTENERS: list[Callable[[list, str], None]] = []


def add_listener(fn):
    """Call ``fn(loglik_trace, label)`` after every EM run."""
    _LISTENERS.append(fn)
    return fn


def remove_listener(fn):
    if fn in _LISTENERS:
        _LISTENERS.remove(fn)


def notify(trace, label):
    for fn in list(_LISTENERS):
        fn(list(trace), label)


def monotone_violations(trace, rel=1e-8):
    """Indices ``k`` where ``l[k+1] < l[k] - rel * |l[k]|``."""
    return [k for k in range(len(trace) - 1)
            if trace[k + 1] < trace[k] - rel * abs(trace[k])]
