"""The three noisy metric families and the fixed-schema metric store.

Everything in this module runs inside the privacy boundary: it reads raw
per-user records and emits only :class:`~mobility_dp.dp.NoisyMetric` values.
"""

from __future__ import annotations

import datetime as dt
import json
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .bounding import ContributionCap, bound_visits
from .domain import (
    PlaceCategory,
    RawEvents,
    RegionTree,
    ResidentialStay,
    WorkStay,
    validate_events,
)
from .dp import MetricKind, NoiseSpec, NoisyMetric, derive_rng, noise_spec_for, sample_laplace

WORK_HOURS_THRESHOLD = 1.0
RESIDENTIAL_OFFSET = 12.0
HOURS_PER_DAY = 24.0


class MetricFamily(str, Enum):
    VISITS = "visits"
    RESIDENTIAL = "residential"
    WORKPLACES = "workplaces"


@dataclass(frozen=True)
class DailyMetricKey:
    region: str
    date: dt.date
    family: MetricFamily
    category: PlaceCategory | None = None

    def __post_init__(self):
        if (self.family is MetricFamily.VISITS) != (self.category is not None):
            raise ValueError("category must be set exactly for the visits family")

    def sort_key(self) -> tuple:
        return (self.region, self.date, self.family.value, self.category.value if self.category else "")


def _noisy(raw: float, spec: NoiseSpec, kind: MetricKind, rng, add_noise: bool) -> NoisyMetric:
    if not add_noise:
        return NoisyMetric(float(raw), spec, kind, noise_added=False)
    return NoisyMetric(float(raw) + sample_laplace(spec.scale_b, rng), spec, kind)


def visits_count(
    users: Iterable[str],
    key: DailyMetricKey,
    level: int,
    rng: np.random.Generator | None,
    *,
    add_noise: bool = True,
) -> NoisyMetric:
    """Noisy number of distinct users holding the key's (category, region) pair after capping."""
    if key.family is not MetricFamily.VISITS:
        raise ValueError(f"visits_count called with a {key.family.value} key")
    raw = len(set(users))
    return _noisy(raw, noise_spec_for(MetricKind.VISITS, level), MetricKind.VISITS, rng, add_noise)


@dataclass(frozen=True)
class ResidentialMetric:
    """Noisy offset sum and noisy count for one region-day; ``value`` is the clamped mean in hours."""

    noisy_sum: NoisyMetric
    noisy_count: NoisyMetric

    @property
    def value(self) -> float:
        return clamped_mean_hours(self.noisy_sum.value, self.noisy_count.value)

    @property
    def user_count(self) -> float:
        return self.noisy_count.value

    def interval(self, coverage: float) -> tuple[float, float]:
        """Interval for the mean hours by interval arithmetic on the sum and count intervals.

        Each component gets half of the miss probability so the ratio interval
        keeps the requested coverage.
        """
        part = 1.0 - (1.0 - coverage) / 2.0
        s_lo, s_hi = self.noisy_sum.interval(part)
        c_lo, c_hi = self.noisy_count.interval(part)
        if c_lo <= 0:
            return (0.0, HOURS_PER_DAY)
        q = (s_lo / c_lo, s_lo / c_hi, s_hi / c_lo, s_hi / c_hi)
        lo = _clamp(min(q) + RESIDENTIAL_OFFSET, 0.0, HOURS_PER_DAY)
        hi = _clamp(max(q) + RESIDENTIAL_OFFSET, 0.0, HOURS_PER_DAY)
        return (lo, hi)


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def clamped_mean_hours(noisy_sum: float, noisy_count: float) -> float:
    """``clamp(noisy_sum / noisy_count + 12, 0, 24)``; a zero count resolves by the sign of the sum."""
    if noisy_count == 0:
        if noisy_sum == 0:
            return RESIDENTIAL_OFFSET
        return HOURS_PER_DAY if noisy_sum > 0 else 0.0
    return _clamp(noisy_sum / noisy_count + RESIDENTIAL_OFFSET, 0.0, HOURS_PER_DAY)


def _one_per_user(stays, what: str) -> None:
    users = [s.user_id for s in stays]
    if len(users) != len(set(users)):
        raise ValueError(f"{what}: more than one record for a user")


def residential_mean(
    stays: Sequence[ResidentialStay],
    level: int,
    rng_sum: np.random.Generator | None,
    rng_count: np.random.Generator | None = None,
    *,
    add_noise: bool = True,
) -> ResidentialMetric:
    """Bounded mean of hours at residence. An empty region yields noise-only cells."""
    _one_per_user(stays, "residential_mean")
    s = sum(_clamp(st.hours_at_residence, 0.0, HOURS_PER_DAY) - RESIDENTIAL_OFFSET for st in stays)
    c = len(stays)
    rng_count = rng_sum if rng_count is None else rng_count
    noisy_sum = _noisy(s, noise_spec_for(MetricKind.RESIDENTIAL_SUM, level),
                       MetricKind.RESIDENTIAL_SUM, rng_sum, add_noise)
    noisy_count = _noisy(c, noise_spec_for(MetricKind.RESIDENTIAL_COUNT, level),
                         MetricKind.RESIDENTIAL_COUNT, rng_count, add_noise)
    return ResidentialMetric(noisy_sum, noisy_count)


def workplaces_count(
    stays: Sequence[WorkStay],
    level: int,
    rng: np.random.Generator | None,
    *,
    add_noise: bool = True,
) -> NoisyMetric:
    """Noisy number of users with strictly more than one hour at work, keyed by residence."""
    _one_per_user(stays, "workplaces_count")
    raw = sum(1 for st in stays if st.hours_at_workplace > WORK_HOURS_THRESHOLD)
    return _noisy(raw, noise_spec_for(MetricKind.WORKPLACES, level), MetricKind.WORKPLACES, rng, add_noise)


def date_range(start: dt.date, end: dt.date) -> list[dt.date]:
    """Inclusive list of days; empty when ``end < start``."""
    return [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]


def materialize_fixed_schema(tree: RegionTree, dates: Sequence[dt.date]) -> list[DailyMetricKey]:
    keys = []
    for region in tree:
        for day in dates:
            for cat in PlaceCategory:
                keys.append(DailyMetricKey(region.id, day, MetricFamily.VISITS, cat))
            keys.append(DailyMetricKey(region.id, day, MetricFamily.RESIDENTIAL))
            keys.append(DailyMetricKey(region.id, day, MetricFamily.WORKPLACES))
    return keys


class MetricStore:
    """All released metrics for a fixed (region x day x family x category) schema."""

    def __init__(self):
        self.counts: dict[DailyMetricKey, NoisyMetric] = {}
        self.residential: dict[DailyMetricKey, ResidentialMetric] = {}

    def __len__(self) -> int:
        return len(self.counts) + len(self.residential)

    def __contains__(self, key: DailyMetricKey) -> bool:
        return key in self.counts or key in self.residential

    def __getitem__(self, key: DailyMetricKey) -> NoisyMetric | ResidentialMetric:
        if key.family is MetricFamily.RESIDENTIAL:
            return self.residential[key]
        return self.counts[key]

    def __setitem__(self, key: DailyMetricKey, metric) -> None:
        if key.family is MetricFamily.RESIDENTIAL:
            if not isinstance(metric, ResidentialMetric):
                raise TypeError("residential keys hold ResidentialMetric values")
            self.residential[key] = metric
        else:
            if not isinstance(metric, NoisyMetric):
                raise TypeError("count keys hold NoisyMetric values")
            self.counts[key] = metric

    def keys(self) -> list[DailyMetricKey]:
        return sorted([*self.counts, *self.residential], key=DailyMetricKey.sort_key)

    def items(self) -> Iterator[tuple[DailyMetricKey, NoisyMetric | ResidentialMetric]]:
        for k in self.keys():
            yield k, self[k]

    def dates(self) -> list[dt.date]:
        return sorted({k.date for k in self.counts} | {k.date for k in self.residential})

    def regions(self) -> set[str]:
        return {k.region for k in self.counts} | {k.region for k in self.residential}

    # -- serialization: one NoisyMetric per line --------------------------

    def to_records(self) -> Iterator[dict]:
        for key, metric in self.items():
            parts = (
                [metric.noisy_sum, metric.noisy_count]
                if isinstance(metric, ResidentialMetric)
                else [metric]
            )
            for m in parts:
                yield {
                    "region": key.region,
                    "date": key.date.isoformat(),
                    "family": key.family.value,
                    "category": key.category.value if key.category else None,
                    "kind": m.kind.value,
                    "value": m.value,
                    "scale_b": m.noise.scale_b,
                    "epsilon": str(float(m.noise.epsilon)),
                    "sensitivity": m.noise.sensitivity,
                    "noise_added": m.noise_added,
                }

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "MetricStore":
        store = cls()
        pending: dict[DailyMetricKey, dict[MetricKind, NoisyMetric]] = defaultdict(dict)
        for rec in records:
            key = DailyMetricKey(
                rec["region"],
                dt.date.fromisoformat(rec["date"]),
                MetricFamily(rec["family"]),
                PlaceCategory(rec["category"]) if rec.get("category") else None,
            )
            spec = NoiseSpec(float(rec["scale_b"]), Fraction(rec["epsilon"]), float(rec["sensitivity"]))
            metric = NoisyMetric(float(rec["value"]), spec, MetricKind(rec["kind"]), bool(rec["noise_added"]))
            if key.family is MetricFamily.RESIDENTIAL:
                pending[key][metric.kind] = metric
            else:
                store[key] = metric
        for key, parts in pending.items():
            try:
                store[key] = ResidentialMetric(
                    parts[MetricKind.RESIDENTIAL_SUM], parts[MetricKind.RESIDENTIAL_COUNT]
                )
            except KeyError as exc:
                raise ValueError(f"residential cell {key} lacks its {exc.args[0].value} entry") from None
        return store

    @classmethod
    def load(cls, path: str | Path) -> "MetricStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(json.loads(line) for line in fh if line.strip())


def aggregate(
    tree: RegionTree,
    events: RawEvents,
    dates: Sequence[dt.date],
    root_seed: int,
    *,
    cap: ContributionCap = ContributionCap(),
    add_noise: bool = True,
) -> MetricStore:
    """Bound, aggregate and noise every cell of the fixed schema.

    Cells without data still receive noise. Each key draws from a generator
    derived from ``root_seed`` and the key itself.
    """
    validate_events(events, tree)
    date_set = set(dates)
    outside = sorted(d for d in events.dates() if d not in date_set)
    if outside:
        raise ValueError(f"events dated {outside[0]} fall outside the aggregation range")

    visit_users: dict[tuple[str, dt.date, PlaceCategory], set[str]] = defaultdict(set)
    for (user, day, _level), pairs in bound_visits(events.visits, cap, root_seed).items():
        for cat, region in pairs:
            visit_users[(region, day, cat)].add(user)

    res_by_cell: dict[tuple[str, dt.date], list[ResidentialStay]] = defaultdict(list)
    for st in events.residential:
        for region in st.region_path:
            res_by_cell[(region, st.date)].append(st)
    work_by_cell: dict[tuple[str, dt.date], list[WorkStay]] = defaultdict(list)
    for st in events.work:
        for region in st.residence_region_path:
            work_by_cell[(region, st.date)].append(st)

    def rng_for(key: DailyMetricKey, kind: MetricKind):
        if not add_noise:
            return None
        cat = key.category.value if key.category else ""
        return derive_rng(root_seed, "noise", key.region, key.date.isoformat(), key.family.value, cat, kind.value)

    store = MetricStore()
    for key in materialize_fixed_schema(tree, dates):
        level = tree[key.region].level
        cell = (key.region, key.date)
        if key.family is MetricFamily.VISITS:
            users = visit_users.get((key.region, key.date, key.category), ())
            store[key] = visits_count(users, key, level, rng_for(key, MetricKind.VISITS), add_noise=add_noise)
        elif key.family is MetricFamily.RESIDENTIAL:
            store[key] = residential_mean(
                res_by_cell.get(cell, []),
                level,
                rng_for(key, MetricKind.RESIDENTIAL_SUM),
                rng_for(key, MetricKind.RESIDENTIAL_COUNT),
                add_noise=add_noise,
            )
        else:
            store[key] = workplaces_count(
                work_by_cell.get(cell, []), level, rng_for(key, MetricKind.WORKPLACES), add_noise=add_noise
            )
    return store

