"""Invocation counting for modules that must stay out of the inference path."""

from __future__ import annotations

import contextlib
import functools
from collections import Counter

_active: list[Counter] = []


def record(name: str) -> None:
    for c in _active:
        c[name] += 1


def traced(name: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            record(name)
            return fn(*args, **kwargs)

        return wrapper

    return deco


@contextlib.contextmanager
def count_invocations():
    c: Counter = Counter()
    _active.append(c)
    try:
        yield c
    finally:
        _active.remove(c)
