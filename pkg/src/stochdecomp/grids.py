"""Admissible joint coupling values on finite per-unit grids.

Given, for each unit, a finite set of candidate coupling vectors, the
admissible joint values are the concatenations ``y`` with ``A y = 0``.
Units are processed in order while carrying the partial products
``A[:, cols<=i] y``; a row is checked (and dropped from the key) as soon as
the last unit touching it has been placed.  For sparse, incidence-like
matrices the number of distinct partial keys stays small, so neither
routine ever forms the full product of candidate sets.
"""
from __future__ import annotations

import itertools

import numpy as np

from .model import MEMBERSHIP_TOL, ModelError, as_rows

KEY_DECIMALS = 9


class GridBudgetError(ModelError):
    """Enumeration would exceed its configured size."""


def _row_schedule(a: np.ndarray, offsets: np.ndarray, n_units: int):
    """For each unit, the rows whose last non-zero column belongs to it."""
    last = np.full(a.shape[0], -1)
    for i in range(n_units):
        cols = slice(offsets[i], offsets[i + 1])
        touched = np.any(np.abs(a[:, cols]) > 0, axis=1)
        last[touched] = i
    closing = [np.flatnonzero(last == i) for i in range(n_units)]
    # rows still open after unit i: touched by some unit <= i and closed later
    first = np.full(a.shape[0], n_units)
    for i in reversed(range(n_units)):
        cols = slice(offsets[i], offsets[i + 1])
        first[np.any(np.abs(a[:, cols]) > 0, axis=1)] = i
    open_after = [np.flatnonzero((first <= i) & (last > i)) for i in range(n_units)]
    return closing, open_after, np.flatnonzero(last == -1)


def _contributions(value_sets, a, offsets):
    return [np.asarray(v, float).reshape(len(v), -1) @ a[:, offsets[i]:offsets[i + 1]].T
            for i, v in enumerate(value_sets)]


def _key(vec):
    return tuple((np.round(vec, KEY_DECIMALS) + 0.0).tolist())


def min_sum_admissible(value_sets, costs, a: np.ndarray, tol: float = MEMBERSHIP_TOL):
    """Minimize ``sum_i costs[i][k_i]`` over admissible choices ``(k_i)``.

    ``value_sets[i]`` is a ``(K_i, m_i)`` array of candidate coupling
    vectors of unit ``i``; ``costs[i]`` has length ``K_i`` and may contain
    +inf.  Returns ``(value, choice)`` with ``choice`` a tuple of indices,
    or ``None`` if no admissible combination exists.  Ties keep the first
    combination in lexicographic index order.
    """
    n = len(value_sets)
    widths = [np.shape(v)[1] for v in value_sets]
    a = as_rows(a, sum(widths))
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    closing, open_after, _ = _row_schedule(a, offsets, n)
    contrib = _contributions(value_sets, a, offsets)
    # key -> (cost, partial, choice)
    frontier = {(): (0.0, np.zeros(a.shape[0]), ())}
    for i in range(n):
        ci = np.asarray(costs[i], float)
        new = {}
        for cost, partial, choice in frontier.values():
            ps = partial[None, :] + contrib[i]
            ok = np.all(np.abs(ps[:, closing[i]]) <= tol, axis=1)
            for k in np.flatnonzero(ok):
                val = cost + ci[k]
                key = _key(ps[k, open_after[i]])
                cur = new.get(key)
                cand = choice + (int(k),)
                if cur is None or val < cur[0] or (val == cur[0] and cand < cur[2]):
                    new[key] = (val, ps[k], cand)
        frontier = new
        if not frontier:
            return None
    best = None
    for val, _, choice in frontier.values():
        if best is None or val < best[0] or (val == best[0] and choice < best[1]):
            best = (val, choice)
    return best


def enumerate_admissible(value_sets, a: np.ndarray, tol: float = MEMBERSHIP_TOL,
                         limit: int | None = None) -> np.ndarray:
    """All admissible index combinations, shape ``(n_combos, n_units)``, lexicographic."""
    n = len(value_sets)
    widths = [np.shape(v)[1] for v in value_sets]
    a = as_rows(a, sum(widths))
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    closing, open_after, _ = _row_schedule(a, offsets, n)
    contrib = _contributions(value_sets, a, offsets)
    # key -> (partial, list of choices); choices sharing a key share the partial sums
    frontier = {(): (np.zeros(a.shape[0]), [()])}
    for i in range(n):
        new = {}
        for partial, choices in frontier.values():
            ps = partial[None, :] + contrib[i]
            ok = np.all(np.abs(ps[:, closing[i]]) <= tol, axis=1)
            for k in np.flatnonzero(ok):
                key = _key(ps[k, open_after[i]])
                slot = new.setdefault(key, (ps[k], []))
                slot[1].extend(c + (int(k),) for c in choices)
        frontier = new
        total = sum(len(c) for _, c in frontier.values())
        if limit is not None and total > limit:
            raise GridBudgetError(f"more than {limit} admissible coupling combinations")
    combos = sorted(itertools.chain.from_iterable(c for _, c in frontier.values()))
    return np.array(combos, dtype=np.int64).reshape(-1, n)


def nearest_admissible(value_sets, target, a: np.ndarray, tol: float = MEMBERSHIP_TOL):
    """Admissible grid point closest (Euclidean) to ``target`` (concatenated)."""
    widths = [np.shape(v)[1] for v in value_sets]
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    target = np.asarray(target, float)
    costs = [np.sum((np.asarray(v, float) - target[offsets[i]:offsets[i + 1]]) ** 2, axis=1)
             for i, v in enumerate(value_sets)]
    return min_sum_admissible(value_sets, costs, a, tol)
