"""Post-processing of released metrics into the published percent-change report.

Only :class:`~mobility_dp.metrics.MetricStore` contents and public noise
parameters are read here; nothing in this module touches raw events, so no
privacy budget is spent.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .domain import (
    RawEvents,
    RegionNode,
    RegionTree,
    ReportColumn,
    ResidentialStay,
    VisitEvent,
    WorkStay,
    categories_of,
    validate_region_tree,
)
from .dp import NoisyMetric
from .metrics import DailyMetricKey, MetricFamily, MetricStore, date_range

WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


class SuppressionReason(str, Enum):
    SMALL_AREA = "small_area"
    LOW_USER_COUNT = "low_user_count"
    UNRELIABLE = "unreliable"


class MissingBaselineError(ValueError):
    pass


@dataclass(frozen=True)
class ReportConfig:
    baseline_start: dt.date = dt.date(2020, 1, 3)
    baseline_end: dt.date = dt.date(2020, 2, 6)
    coverage: float = 0.975
    max_deviation_pp: float = 10.0
    min_area_km2: float = 3.0
    min_users: float = 100.0

    def __post_init__(self):
        if self.baseline_end < self.baseline_start:
            raise ValueError("baseline window ends before it starts")
        if not 0.0 <= self.coverage < 1.0:
            raise ValueError("coverage must lie in [0, 1)")

    @property
    def baseline_window(self) -> list[dt.date]:
        return date_range(self.baseline_start, self.baseline_end)


class Estimate(Protocol):
    @property
    def value(self) -> float: ...

    @property
    def user_count(self) -> float: ...

    def interval(self, coverage: float) -> tuple[float, float]: ...


def baseline_days(day: dt.date | int, config: ReportConfig = ReportConfig()) -> list[dt.date]:
    """Days of the baseline window sharing a weekday with ``day`` (a date or ``date.weekday()``)."""
    weekday = day.weekday() if isinstance(day, dt.date) else int(day)
    days = [d for d in config.baseline_window if d.weekday() == weekday]
    if not days:
        raise ValueError(f"baseline window has no {WEEKDAYS[weekday]}")
    return days


def baseline_for(
    store: MetricStore,
    region: str,
    family: MetricFamily,
    weekday: int,
    category=None,
    config: ReportConfig = ReportConfig(),
) -> float:
    """Median of the released metric over the same-weekday baseline days."""
    values = []
    for d in baseline_days(weekday, config):
        key = DailyMetricKey(region, d, MetricFamily(family), category)
        if key not in store:
            raise MissingBaselineError(f"metric store lacks baseline day {d.isoformat()} for {region}")
        values.append(store[key].value)
    return statistics.median(values)


@dataclass(frozen=True)
class CombinedMetric:
    """Sum of independently noised category counts published under one column.

    The interval adds the constituents' half-widths, which covers the sum with
    at least the requested probability.
    """

    parts: tuple[NoisyMetric, ...]

    @property
    def value(self) -> float:
        return math.fsum(p.value for p in self.parts)

    @property
    def user_count(self) -> float:
        return self.value

    def half_width(self, coverage: float) -> float:
        return math.fsum((p.interval(coverage)[1] - p.interval(coverage)[0]) / 2 for p in self.parts)

    def interval(self, coverage: float) -> tuple[float, float]:
        t = self.half_width(coverage)
        return (self.value - t, self.value + t)


def combine_visit_categories(cells: Iterable[NoisyMetric]) -> CombinedMetric:
    return CombinedMetric(tuple(cells))


@dataclass(frozen=True)
class BaselineEstimate:
    """Median of the baseline-day estimates.

    Its interval is ``[median of lower bounds, median of upper bounds]``: when
    every member interval holds its true value, the true median lies inside.
    For members sharing one noise scale this is the median plus or minus the
    single-value half-width.
    """

    members: tuple

    @property
    def value(self) -> float:
        return statistics.median(m.value for m in self.members)

    @property
    def user_count(self) -> float:
        return statistics.median(m.user_count for m in self.members)

    def interval(self, coverage: float) -> tuple[float, float]:
        bounds = [m.interval(coverage) for m in self.members]
        return (statistics.median(b[0] for b in bounds), statistics.median(b[1] for b in bounds))


def column_estimate(store: MetricStore, region: str, day: dt.date, column: ReportColumn) -> Estimate:
    """The released estimate backing one report column for one region-day."""
    try:
        if column is ReportColumn.RESIDENTIAL:
            return store[DailyMetricKey(region, day, MetricFamily.RESIDENTIAL)]
        if column is ReportColumn.WORKPLACES:
            return store[DailyMetricKey(region, day, MetricFamily.WORKPLACES)]
        return combine_visit_categories(
            store[DailyMetricKey(region, day, MetricFamily.VISITS, cat)] for cat in categories_of(column)
        )
    except KeyError:
        raise KeyError(f"metric store has no {column.value} cell for {region} on {day.isoformat()}") from None


def percent_change(metric: float, baseline: float) -> int:
    """``(metric / baseline - 1) * 100`` rounded half away from zero."""
    if not baseline > 0:
        raise ValueError("baseline must be positive")
    # same quantity as (m / b - 1) * 100 with less cancellation near zero
    pct = 100.0 * (metric - baseline) / baseline
    return int(math.copysign(math.floor(abs(pct) + 0.5), pct))


def reliability_filter(
    metric: Estimate,
    baseline: Estimate | Sequence[Estimate],
    dp_ratio: float | None = None,
    *,
    coverage: float = 0.975,
    max_deviation_pp: float = 10.0,
) -> SuppressionReason | None:
    """``None`` to keep the cell, ``UNRELIABLE`` to suppress it.

    Suppresses when ``m_min / b_max`` or ``m_max / b_min`` differs from the
    released ratio by more than ``max_deviation_pp`` percentage points.
    """
    if not hasattr(baseline, "interval"):
        baseline = BaselineEstimate(tuple(baseline))
    b = baseline.value
    if not b > 0:
        return SuppressionReason.UNRELIABLE
    if dp_ratio is None:
        dp_ratio = metric.value / b
    m_lo, m_hi = metric.interval(coverage)
    b_lo, b_hi = baseline.interval(coverage)
    if not b_lo > 0:
        return SuppressionReason.UNRELIABLE
    limit = max_deviation_pp / 100.0
    for bound in (m_lo / b_hi, m_hi / b_lo):
        if abs(bound - dp_ratio) > limit:
            return SuppressionReason.UNRELIABLE
    return None


def suppress_small(
    region: RegionNode,
    noisy_user_count: float | NoisyMetric,
    *,
    min_area_km2: float = 3.0,
    min_users: float = 100.0,
) -> SuppressionReason | None:
    if region.area_km2 < min_area_km2:
        return SuppressionReason.SMALL_AREA
    count = noisy_user_count.value if isinstance(noisy_user_count, NoisyMetric) else noisy_user_count
    if count < min_users:
        return SuppressionReason.LOW_USER_COUNT
    return None


# -- small-region merging ----------------------------------------------------

ALLOWED_CROSS_BORDER = frozenset({frozenset({"VA", "IT"})})


@dataclass
class MergeResult:
    units: list[RegionNode] = field(default_factory=list)
    assignment: dict[str, str] = field(default_factory=dict)
    unmerged: list[str] = field(default_factory=list)

    def apply(self, tree: RegionTree) -> RegionTree:
        """Tree with merged level-2 regions replaced by their units."""
        kept = [n for n in tree if n.id not in self.assignment]
        return validate_region_tree([*kept, *self.units])

    def remap(self, events: RawEvents, tree: RegionTree) -> RawEvents:
        """Re-attribute events from merged regions to their unit.

        A unit that crossed a border takes its host's ancestor chain.
        """
        unit_by_id = {u.id: u for u in self.units}

        def new_path(path):
            unit_id = self.assignment.get(path[2])
            if unit_id is None:
                return path
            unit = unit_by_id[unit_id]
            if unit.parent == path[1]:
                return (path[0], path[1], unit_id)
            return (tree.path(unit.parent)[0], unit.parent, unit_id)

        return RawEvents(
            [VisitEvent(e.user_id, e.date, e.category, new_path(e.region_path)) for e in events.visits],
            [ResidentialStay(e.user_id, e.date, e.hours_at_residence, new_path(e.region_path))
             for e in events.residential],
            [WorkStay(e.user_id, e.date, e.hours_at_workplace, new_path(e.residence_region_path))
             for e in events.work],
        )


def _by_size(nodes: Iterable[RegionNode]) -> list[RegionNode]:
    return sorted(nodes, key=lambda n: (-n.area_km2, n.id))


def _make_unit(members: list[RegionNode]) -> RegionNode:
    members = _by_size(members)
    host = members[0]
    return RegionNode(
        id="+".join(m.id for m in members),
        name=" + ".join(m.name for m in members),
        level=2,
        parent=host.parent,
        area_km2=math.fsum(m.area_km2 for m in members),
        country_code=host.country_code,
    )


def merge_small_regions(
    tree: RegionTree,
    *,
    min_area_km2: float = 3.0,
    neighbors: Mapping[str, str] | None = None,
) -> MergeResult:
    """Greedily merge sub-threshold level-2 siblings, largest first.

    Siblings are accumulated until their union reaches ``min_area_km2``; a
    remainder that never reaches it is left unmerged. ``neighbors`` maps a
    leftover small region to a level-2 region it may join outside its
    parent; that is only allowed within one country or for an allowed
    cross-border pair (Vatican City and Italy).
    """
    groups: dict[str, list[RegionNode]] = {}
    for n in tree.at_level(2):
        if n.area_km2 < min_area_km2:
            groups.setdefault(n.parent, []).append(n)

    unit_members: list[list[RegionNode]] = []
    leftover: list[RegionNode] = []
    for parent in sorted(groups):
        current: list[RegionNode] = []
        for node in _by_size(groups[parent]):
            current.append(node)
            if math.fsum(m.area_km2 for m in current) >= min_area_km2:
                unit_members.append(current)
                current = []
        leftover.extend(current)

    for node in list(leftover):
        target_id = (neighbors or {}).get(node.id)
        if target_id is None:
            continue
        if target_id not in tree or tree[target_id].level != 2:
            raise ValueError(f"merge target {target_id!r} is not a level-2 region")
        target = tree[target_id]
        countries = frozenset({node.country_code, target.country_code})
        if len(countries) > 1 and countries not in ALLOWED_CROSS_BORDER:
            raise ValueError(
                f"cannot merge {node.id} into {target_id}: crosses {node.country_code}/{target.country_code}"
            )
        leftover.remove(node)
        host = next((u for u in unit_members if any(m.id == target_id for m in u)), None)
        if host is None:
            host = [target]
            if target in leftover:
                leftover.remove(target)
            unit_members.append(host)
        host.append(node)

    result = MergeResult(unmerged=sorted(n.id for n in leftover))
    for members in unit_members:
        unit = _make_unit(members)
        result.units.append(unit)
        for m in members:
            result.assignment[m.id] = unit.id
    return result


# -- report assembly ---------------------------------------------------------


@dataclass(frozen=True)
class ReportCell:
    region: str
    date: dt.date
    column: ReportColumn
    percent: int | None = None
    reason: SuppressionReason | None = None

    def __post_init__(self):
        if (self.percent is None) == (self.reason is None):
            raise ValueError("a cell is either published with a percent or suppressed with a reason")

    @property
    def published(self) -> bool:
        return self.reason is None


class BaselineTable:
    """Baseline estimates per (region, column, weekday), built lazily from a store."""

    def __init__(self, store: MetricStore, config: ReportConfig = ReportConfig()):
        self.store = store
        self.config = config
        self._cache: dict[tuple[str, ReportColumn, int], BaselineEstimate] = {}

    def check_coverage(self, regions: Iterable[str]) -> None:
        present = set(self.store.dates())
        for d in self.config.baseline_window:
            if d not in present:
                raise MissingBaselineError(f"metric store lacks baseline day {d.isoformat()}")
        stored = self.store.regions()
        for r in regions:
            if r not in stored:
                raise MissingBaselineError(f"metric store has no cells for region {r}")

    def get(self, region: str, column: ReportColumn, weekday: int) -> BaselineEstimate:
        key = (region, column, weekday)
        if key not in self._cache:
            days = baseline_days(weekday, self.config)
            try:
                members = tuple(column_estimate(self.store, region, d, column) for d in days)
            except KeyError as exc:
                raise MissingBaselineError(str(exc.args[0])) from None
            self._cache[key] = BaselineEstimate(members)
        return self._cache[key]


def evaluate_cell(
    region: RegionNode,
    day: dt.date,
    column: ReportColumn,
    store: MetricStore,
    baselines: BaselineTable,
    config: ReportConfig,
) -> ReportCell:
    est = column_estimate(store, region.id, day, column)
    reason = suppress_small(region, est.user_count, min_area_km2=config.min_area_km2, min_users=config.min_users)
    if reason is None:
        base = baselines.get(region.id, column, day.weekday())
        reason = reliability_filter(
            est, base, coverage=config.coverage, max_deviation_pp=config.max_deviation_pp
        )
        if reason is None:
            return ReportCell(region.id, day, column, percent=percent_change(est.value, base.value))
    return ReportCell(region.id, day, column, reason=reason)


REPORT_COLUMNS = tuple(ReportColumn)


def build_report(
    store: MetricStore,
    tree: RegionTree,
    config: ReportConfig = ReportConfig(),
    dates: Sequence[dt.date] | None = None,
) -> list[ReportCell]:
    """Resolve every (region, date, column) to a published percent or a suppression."""
    baselines = BaselineTable(store, config)
    baselines.check_coverage(r.id for r in tree)
    dates = store.dates() if dates is None else list(dates)
    cells = []
    for region in tree:
        for day in dates:
            for column in REPORT_COLUMNS:
                cells.append(evaluate_cell(region, day, column, store, baselines, config))
    return cells


CSV_HEADER = [
    "country_region_code",
    "country_region",
    "sub_region_1",
    "sub_region_2",
    "date",
    *(c.csv_header for c in REPORT_COLUMNS),
]


def _region_columns(tree: RegionTree, region_id: str) -> list[str]:
    path = tree.path(region_id)
    names = [tree[r].name for r in path] + [""] * (3 - len(path))
    return [tree[path[0]].country_code, *names]


def emit_report(cells: Iterable[ReportCell], tree: RegionTree) -> tuple[str, str]:
    """Render cells as (CSV text, suppression sidecar text).

    Rows are ordered by region path then date; suppressed cells are empty in
    the CSV and listed with their reason in the sidecar.
    """
    rows: dict[tuple[str, dt.date], dict[ReportColumn, ReportCell]] = {}
    for c in cells:
        rows.setdefault((c.region, c.date), {})[c.column] = c

    ordered = sorted(rows, key=lambda k: (tree.path(k[0]), k[1]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    sidecar = []
    for region, day in ordered:
        by_col = rows[(region, day)]
        values = []
        for col in REPORT_COLUMNS:
            cell = by_col.get(col)
            if cell is None or not cell.published:
                values.append("")
                if cell is not None:
                    sidecar.append(json.dumps(
                        {"region": region, "date": day.isoformat(), "column": col.value,
                         "reason": cell.reason.value},
                        sort_keys=True,
                    ))
            else:
                values.append(str(cell.percent))
        writer.writerow([*_region_columns(tree, region), day.isoformat(), *values])
    return buf.getvalue(), "".join(line + "\n" for line in sidecar)


def write_report(cells: Iterable[ReportCell], tree: RegionTree, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text, sidecar = emit_report(cells, tree)
    csv_path, log_path = out_dir / "report.csv", out_dir / "suppressed.jsonl"
    csv_path.write_text(text, encoding="utf-8")
    log_path.write_text(sidecar, encoding="utf-8")
    return csv_path, log_path
