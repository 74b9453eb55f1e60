"""Synthetic users with known ground truth, standing in for real location data."""

from __future__ import annotations

import datetime as dt
import json
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .domain import (
    PlaceCategory,
    RawEvents,
    RegionNode,
    RegionTree,
    ReportColumn,
    ResidentialStay,
    VisitEvent,
    WorkStay,
    categories_of,
    toy_region_tree,
    validate_region_tree,
)
from .dp import derive_rng
from .metrics import date_range
from .report import ReportConfig, baseline_days

DEFAULT_VISIT_RATES = {
    PlaceCategory.RETAIL: 0.30,
    PlaceCategory.RECREATION: 0.15,
    PlaceCategory.EATERIES: 0.35,
    PlaceCategory.GROCERIES: 0.40,
    PlaceCategory.PHARMACIES: 0.10,
    PlaceCategory.TRANSIT: 0.25,
    PlaceCategory.PARKS: 0.20,
}


@dataclass
class ScenarioConfig:
    regions: list[RegionNode] = field(default_factory=lambda: toy_region_tree().nodes())
    users_per_region: int = 200
    start: dt.date = dt.date(2020, 1, 1)
    end: dt.date = dt.date(2020, 3, 31)
    cutover: dt.date = dt.date(2020, 3, 15)
    visit_rates: dict[PlaceCategory, float] = field(default_factory=lambda: dict(DEFAULT_VISIT_RATES))
    lockdown_multipliers: dict[PlaceCategory, float] = field(default_factory=dict)
    repeat_visit_mean: float = 0.3
    travel_prob: float = 0.05
    residential_mean_before: float = 12.0
    residential_mean_after: float = 12.0
    residential_spread: float = 2.0
    work_rate_before: float = 0.6
    work_rate_after: float = 0.6
    weekend_work_factor: float = 0.3
    seed: int = 0

    def validate(self, window: ReportConfig = ReportConfig()) -> RegionTree:
        tree = validate_region_tree(self.regions)
        if self.users_per_region < 0:
            raise ValueError("users_per_region must be nonnegative")
        if self.end < self.start:
            raise ValueError("simulation ends before it starts")
        if not self.start <= self.cutover <= self.end:
            raise ValueError("cutover must lie inside the simulation range")
        if self.start > window.baseline_start or self.end < window.baseline_end:
            raise ValueError("simulation range must cover the baseline window")
        for cat, rate in self.visit_rates.items():
            mult = self.lockdown_multipliers.get(cat, 1.0)
            if rate < 0 or mult < 0:
                raise ValueError(f"rates for {cat.value} must be nonnegative")
            if rate > 1 or rate * mult > 1:
                raise ValueError(f"daily visit probability for {cat.value} exceeds 1")
        for name in ("travel_prob", "work_rate_before", "work_rate_after", "weekend_work_factor"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.repeat_visit_mean < 0 or self.residential_spread < 0:
            raise ValueError("repeat_visit_mean and residential_spread must be nonnegative")
        return tree

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regions"] = [r.to_record() for r in self.regions]
        for k in ("start", "end", "cutover"):
            d[k] = d[k].isoformat()
        d["visit_rates"] = {c.value: r for c, r in self.visit_rates.items()}
        d["lockdown_multipliers"] = {c.value: m for c, m in self.lockdown_multipliers.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        d = dict(d)
        regions = d.pop("regions", "toy")
        kw: dict = {}
        if regions != "toy":
            kw["regions"] = [RegionNode.from_record(r) for r in regions]
        for k in ("start", "end", "cutover"):
            if k in d:
                kw[k] = dt.date.fromisoformat(d.pop(k))
        for k in ("visit_rates", "lockdown_multipliers"):
            if k in d:
                kw[k] = {PlaceCategory(c): float(v) for c, v in d.pop(k).items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class GroundTruthRow:
    region: str
    date: dt.date
    column: ReportColumn
    value: float | None
    percent_change: float | None

    def to_record(self) -> dict:
        return {
            "region": self.region,
            "date": self.date.isoformat(),
            "column": self.column.value,
            "value": self.value,
            "percent_change": self.percent_change,
        }


@dataclass
class SyntheticDataset:
    tree: RegionTree
    events: RawEvents
    truth: list[GroundTruthRow]
    dates: list[dt.date]

    def truth_table(self) -> dict[tuple[str, dt.date, ReportColumn], GroundTruthRow]:
        return {(r.region, r.date, r.column): r for r in self.truth}


def _path(tree: RegionTree, leaf: str) -> tuple[str, str, str]:
    p = tree.path(leaf)
    return (p[0], p[1], p[2])


def generate(config: ScenarioConfig) -> SyntheticDataset:
    """Draw per-user days and compute noiseless truth by direct counting.

    Each user draws from its own generator derived from the scenario seed, so
    output does not depend on generation order.
    """
    tree = config.validate()
    days = date_range(config.start, config.end)
    cats = [c for c in PlaceCategory if config.visit_rates.get(c, 0.0) > 0]
    after = np.array([d >= config.cutover for d in days])
    weekend = np.array([d.weekday() >= 5 for d in days])
    leaves = tree.at_level(2)
    by_country: dict[str, list[str]] = defaultdict(list)
    for leaf in leaves:
        by_country[leaf.country_code].append(leaf.id)

    events = RawEvents([], [], [])
    for leaf in leaves:
        home = _path(tree, leaf.id)
        elsewhere = [r for r in by_country[leaf.country_code] if r != leaf.id]
        for i in range(config.users_per_region):
            uid = f"{leaf.id}/u{i}"
            rng = derive_rng(config.seed, "user", uid)
            for cat in cats:
                p = np.where(after, config.visit_rates[cat] * config.lockdown_multipliers.get(cat, 1.0),
                             config.visit_rates[cat])
                went = rng.random(len(days)) < p
                repeats = 1 + rng.poisson(config.repeat_visit_mean, len(days))
                travel = rng.random(len(days)) < config.travel_prob
                dest = rng.integers(0, max(len(elsewhere), 1), len(days))
                for j in np.flatnonzero(went):
                    path = _path(tree, elsewhere[dest[j]]) if travel[j] and elsewhere else home
                    for _ in range(int(repeats[j])):
                        events.visits.append(VisitEvent(uid, days[j], cat, path))
            mean = np.where(after, config.residential_mean_after, config.residential_mean_before)
            hours = np.clip(rng.normal(mean, config.residential_spread), 0.0, 24.0)
            work_p = np.where(after, config.work_rate_after, config.work_rate_before)
            work_p = np.where(weekend, work_p * config.weekend_work_factor, work_p)
            works = rng.random(len(days)) < work_p
            work_hours = np.where(works, rng.uniform(1.5, 10.0, len(days)), rng.uniform(0.0, 1.0, len(days)))
            for j, day in enumerate(days):
                events.residential.append(ResidentialStay(uid, day, float(hours[j]), home))
                events.work.append(WorkStay(uid, day, float(work_hours[j]), home))

    truth = ground_truth(tree, events, days)
    return SyntheticDataset(tree, events, truth, days)


def ground_truth(
    tree: RegionTree, events: RawEvents, days: list[dt.date], window: ReportConfig = ReportConfig()
) -> list[GroundTruthRow]:
    """Exact per-cell values and percent changes from unbounded, noiseless counts."""
    visitors: dict[tuple[str, dt.date, PlaceCategory], set[str]] = defaultdict(set)
    for e in events.visits:
        for region in e.region_path:
            visitors[(region, e.date, e.category)].add(e.user_id)
    home_hours: dict[tuple[str, dt.date], list[float]] = defaultdict(list)
    for s in events.residential:
        for region in s.region_path:
            home_hours[(region, s.date)].append(min(max(s.hours_at_residence, 0.0), 24.0))
    workers: dict[tuple[str, dt.date], int] = defaultdict(int)
    for s in events.work:
        if s.hours_at_workplace > 1.0:
            for region in s.residence_region_path:
                workers[(region, s.date)] += 1

    def value(region: str, day: dt.date, column: ReportColumn) -> float | None:
        if column is ReportColumn.RESIDENTIAL:
            hrs = home_hours.get((region, day))
            return statistics.fmean(hrs) if hrs else None
        if column is ReportColumn.WORKPLACES:
            return float(workers.get((region, day), 0))
        return float(sum(len(visitors.get((region, day, c), ())) for c in categories_of(column)))

    have = set(days)
    rows = []
    for region in tree:
        for column in ReportColumn:
            baselines: dict[int, float | None] = {}
            for wd in range(7):
                vals = [value(region.id, d, column) for d in baseline_days(wd, window) if d in have]
                vals = [v for v in vals if v is not None]
                baselines[wd] = statistics.median(vals) if vals else None
            for day in days:
                v = value(region.id, day, column)
                b = baselines[day.weekday()]
                pct = None if v is None or not b else (v / b - 1.0) * 100.0
                rows.append(GroundTruthRow(region.id, day, column, v, pct))
    return rows


def save_ground_truth(rows: list[GroundTruthRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
