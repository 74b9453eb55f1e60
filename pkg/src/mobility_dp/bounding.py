"""Per-user, per-day, per-level capping of visit contributions."""

from __future__ import annotations

import datetime as dt
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .domain import LEVELS, PlaceCategory, VisitEvent
from .dp import derive_rng

Pair = tuple[PlaceCategory, str]


@dataclass(frozen=True)
class ContributionCap:
    max_pairs: int = 4

    def __post_init__(self):
        if self.max_pairs < 1:
            raise ValueError("max_pairs must be at least 1")


def dedupe_pairs(events: Iterable[VisitEvent], level: int) -> frozenset[Pair]:
    """Distinct (category, region) pairs for one user's day at ``level``."""
    pairs = set()
    owner = None
    for e in events:
        if owner is None:
            owner = (e.user_id, e.date)
        elif (e.user_id, e.date) != owner:
            raise ValueError("dedupe_pairs expects events of a single user and day")
        pairs.add((e.category, e.region_path[level]))
    return frozenset(pairs)


def _pair_sort_key(pair: Pair) -> tuple[str, str]:
    return (pair[0].value, pair[1])


def cap_contributions(
    pairs: Iterable[Pair], cap: ContributionCap, rng: np.random.Generator
) -> frozenset[Pair]:
    """Keep a uniformly random ``cap.max_pairs``-subset when there are too many pairs.

    The rng is only consumed when capping is needed.
    """
    # sorted so the result depends on the seed only, never on set iteration order
    items = sorted(set(pairs), key=_pair_sort_key)
    k = cap.max_pairs
    if len(items) <= k:
        return frozenset(items)
    # partial Fisher-Yates: the first k slots end up a uniform k-subset
    n = len(items)
    for i in range(k):
        j = i + int(rng.integers(0, n - i))
        items[i], items[j] = items[j], items[i]
    return frozenset(items[:k])


BoundedVisits = dict[tuple[str, dt.date, int], frozenset[Pair]]


def bound_visits(
    events: Iterable[VisitEvent], cap: ContributionCap, root_seed: int
) -> BoundedVisits:
    """Dedupe and cap every (user, day, level) group.

    Each group draws from its own generator derived from the root seed and the
    group key, so the result does not depend on input order.
    """
    groups: dict[tuple[str, dt.date], list[VisitEvent]] = defaultdict(list)
    for e in events:
        groups[(e.user_id, e.date)].append(e)

    out: BoundedVisits = {}
    for (user, day), evs in groups.items():
        for level in LEVELS:
            pairs = dedupe_pairs(evs, level)
            if len(pairs) > cap.max_pairs:
                rng = derive_rng(root_seed, "cap", user, day.isoformat(), level)
                pairs = cap_contributions(pairs, cap, rng)
            out[(user, day, level)] = pairs
    return out


def max_retained(bounded: BoundedVisits) -> int:
    """Largest number of pairs any (user, day, level) kept; 0 when empty."""
    return max((len(p) for p in bounded.values()), default=0)
