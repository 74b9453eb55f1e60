"""Geography, place categories and the raw per-user records fed to the pipeline."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

FIRST_METRIC_DATE = dt.date(2020, 1, 1)
LEVELS = (0, 1, 2)


class RegionTreeError(ValueError):
    """Raised when a region collection violates the tree invariants."""

    def __init__(self, node_id: str | None, reason: str):
        self.node_id = node_id
        self.reason = reason
        where = f"region {node_id!r}: " if node_id is not None else ""
        super().__init__(f"{where}{reason}")


class PlaceCategory(str, Enum):
    RETAIL = "retail"
    RECREATION = "recreation"
    EATERIES = "eateries"
    GROCERIES = "groceries"
    PHARMACIES = "pharmacies"
    TRANSIT = "transit"
    PARKS = "parks"


class ReportColumn(str, Enum):
    RETAIL_AND_RECREATION = "retail_and_recreation"
    GROCERY_AND_PHARMACY = "grocery_and_pharmacy"
    PARKS = "parks"
    TRANSIT_STATIONS = "transit_stations"
    WORKPLACES = "workplaces"
    RESIDENTIAL = "residential"

    @property
    def label(self) -> str:
        return _COLUMN_LABELS[self]

    @property
    def csv_header(self) -> str:
        return f"{self.value}_percent_change_from_baseline"


_COLUMN_LABELS = {
    ReportColumn.RETAIL_AND_RECREATION: "Retail & recreation",
    ReportColumn.GROCERY_AND_PHARMACY: "Grocery & pharmacy",
    ReportColumn.PARKS: "Parks",
    ReportColumn.TRANSIT_STATIONS: "Transit stations",
    ReportColumn.WORKPLACES: "Workplaces",
    ReportColumn.RESIDENTIAL: "Residential",
}

_CATEGORY_COLUMN = {
    PlaceCategory.RETAIL: ReportColumn.RETAIL_AND_RECREATION,
    PlaceCategory.RECREATION: ReportColumn.RETAIL_AND_RECREATION,
    PlaceCategory.EATERIES: ReportColumn.RETAIL_AND_RECREATION,
    PlaceCategory.GROCERIES: ReportColumn.GROCERY_AND_PHARMACY,
    PlaceCategory.PHARMACIES: ReportColumn.GROCERY_AND_PHARMACY,
    PlaceCategory.TRANSIT: ReportColumn.TRANSIT_STATIONS,
    PlaceCategory.PARKS: ReportColumn.PARKS,
}

VISIT_COLUMNS = (
    ReportColumn.RETAIL_AND_RECREATION,
    ReportColumn.GROCERY_AND_PHARMACY,
    ReportColumn.PARKS,
    ReportColumn.TRANSIT_STATIONS,
)


def published_column_of(category: PlaceCategory) -> ReportColumn:
    """Report column a visit category is published under."""
    return _CATEGORY_COLUMN[PlaceCategory(category)]


def categories_of(column: ReportColumn) -> tuple[PlaceCategory, ...]:
    """Inverse of :func:`published_column_of`; empty for non-visit columns."""
    return tuple(c for c in PlaceCategory if _CATEGORY_COLUMN[c] is column)


@dataclass(frozen=True)
class RegionNode:
    id: str
    name: str
    level: int
    parent: str | None
    area_km2: float
    country_code: str

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "level": self.level,
            "parent_id": self.parent,
            "area_km2": self.area_km2,
            "country_code": self.country_code,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "RegionNode":
        return cls(
            id=str(rec["id"]),
            name=str(rec["name"]),
            level=int(rec["level"]),
            parent=None if rec.get("parent_id") in (None, "") else str(rec["parent_id"]),
            area_km2=float(rec["area_km2"]),
            country_code=str(rec["country_code"]),
        )


RegionPath = tuple[str, str, str]


@dataclass(frozen=True)
class VisitEvent:
    user_id: str
    date: dt.date
    category: PlaceCategory
    region_path: RegionPath


@dataclass(frozen=True)
class ResidentialStay:
    user_id: str
    date: dt.date
    hours_at_residence: float
    region_path: RegionPath


@dataclass(frozen=True)
class WorkStay:
    user_id: str
    date: dt.date
    hours_at_workplace: float
    residence_region_path: RegionPath


class RegionTree:
    """A validated three-level geography. Build with :func:`validate_region_tree`."""

    def __init__(self, nodes: Sequence[RegionNode]):
        self._nodes = {n.id: n for n in nodes}
        self._order = [n.id for n in nodes]
        self._children: dict[str, list[str]] = {}
        for n in nodes:
            if n.parent is not None:
                self._children.setdefault(n.parent, []).append(n.id)

    def __contains__(self, region_id: object) -> bool:
        return region_id in self._nodes

    def __getitem__(self, region_id: str) -> RegionNode:
        return self._nodes[region_id]

    def __iter__(self) -> Iterator[RegionNode]:
        return (self._nodes[i] for i in self._order)

    def __len__(self) -> int:
        return len(self._nodes)

    def at_level(self, level: int) -> list[RegionNode]:
        return [n for n in self if n.level == level]

    def children(self, region_id: str) -> list[RegionNode]:
        return [self._nodes[c] for c in self._children.get(region_id, [])]

    def path(self, region_id: str) -> tuple[str, ...]:
        """Ids from the level-0 ancestor down to ``region_id``."""
        chain = [region_id]
        node = self._nodes[region_id]
        while node.parent is not None:
            chain.append(node.parent)
            node = self._nodes[node.parent]
        return tuple(reversed(chain))

    def country_of(self, region_id: str) -> RegionNode:
        return self._nodes[self.path(region_id)[0]]

    def check_path(self, region_path: Sequence[str]) -> None:
        """Raise :class:`RegionTreeError` unless ``region_path`` is a level 0/1/2 ancestor chain."""
        if len(region_path) != 3:
            raise RegionTreeError(None, f"region path must have 3 entries, got {list(region_path)}")
        for level, rid in enumerate(region_path):
            if rid not in self._nodes:
                raise RegionTreeError(rid, "unknown region in path")
            node = self._nodes[rid]
            if node.level != level:
                raise RegionTreeError(rid, f"expected level {level} in path, found level {node.level}")
            if level > 0 and node.parent != region_path[level - 1]:
                raise RegionTreeError(rid, f"parent is {node.parent!r}, path says {region_path[level - 1]!r}")

    def nodes(self) -> list[RegionNode]:
        return list(self)


def validate_region_tree(regions: Iterable[RegionNode]) -> RegionTree:
    """Check every node invariant and return the tree.

    Raises :class:`RegionTreeError` naming the first offending node, in input order.
    """
    regions = list(regions)
    by_id: dict[str, RegionNode] = {}
    for r in regions:
        if r.id in by_id:
            raise RegionTreeError(r.id, "duplicate region id")
        by_id[r.id] = r

    for r in regions:
        if r.level not in LEVELS:
            raise RegionTreeError(r.id, f"level must be 0, 1 or 2, got {r.level}")
        if not r.area_km2 > 0:
            raise RegionTreeError(r.id, f"nonpositive area {r.area_km2}")
        if r.level == 0:
            if r.parent is not None:
                raise RegionTreeError(r.id, "level 0 region must not have a parent")
            continue
        if r.parent is None or r.parent not in by_id:
            raise RegionTreeError(r.id, f"orphan node, parent {r.parent!r} not found")
        parent = by_id[r.parent]
        if parent.level != r.level - 1:
            raise RegionTreeError(
                r.id, f"level gap: level {r.level} node has level {parent.level} parent {parent.id!r}"
            )
        if parent.country_code != r.country_code:
            raise RegionTreeError(
                r.id, f"cross-country parent: {r.country_code} under {parent.country_code}"
            )
    return RegionTree(regions)


def load_regions(path: str | Path) -> RegionTree:
    """Read a line-delimited JSON region file and validate it."""
    nodes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                nodes.append(RegionNode.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise RegionTreeError(None, f"{path}:{lineno}: malformed region record ({exc})") from exc
    return validate_region_tree(nodes)


def save_regions(regions: Iterable[RegionNode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in regions:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def toy_region_tree() -> RegionTree:
    """One country, two states, four counties. Used by examples and tests."""
    nodes = [
        RegionNode("XA", "Examplia", 0, None, 50000.0, "XA"),
        RegionNode("XA-N", "North", 1, "XA", 20000.0, "XA"),
        RegionNode("XA-S", "South", 1, "XA", 30000.0, "XA"),
        RegionNode("XA-N-1", "Nordham", 2, "XA-N", 800.0, "XA"),
        RegionNode("XA-N-2", "Northby", 2, "XA-N", 1200.0, "XA"),
        RegionNode("XA-S-1", "Southwell", 2, "XA-S", 950.0, "XA"),
        RegionNode("XA-S-2", "Sutton", 2, "XA-S", 400.0, "XA"),
    ]
    return validate_region_tree(nodes)


# -- raw event records -------------------------------------------------------


def _parse_date(value: str | dt.date) -> dt.date:
    return value if isinstance(value, dt.date) else dt.date.fromisoformat(value)


def event_to_record(event: VisitEvent | ResidentialStay | WorkStay) -> dict:
    if isinstance(event, VisitEvent):
        return {
            "type": "visit",
            "user_id": event.user_id,
            "date": event.date.isoformat(),
            "category": event.category.value,
            "region_path": list(event.region_path),
        }
    if isinstance(event, ResidentialStay):
        return {
            "type": "residential",
            "user_id": event.user_id,
            "date": event.date.isoformat(),
            "hours": event.hours_at_residence,
            "region_path": list(event.region_path),
        }
    return {
        "type": "work",
        "user_id": event.user_id,
        "date": event.date.isoformat(),
        "hours": event.hours_at_workplace,
        "region_path": list(event.residence_region_path),
    }


def event_from_record(rec: Mapping) -> VisitEvent | ResidentialStay | WorkStay:
    kind = rec["type"]
    path = tuple(str(p) for p in rec["region_path"])
    day = _parse_date(rec["date"])
    user = str(rec["user_id"])
    if kind == "visit":
        return VisitEvent(user, day, PlaceCategory(rec["category"]), path)
    if kind == "residential":
        return ResidentialStay(user, day, float(rec["hours"]), path)
    if kind == "work":
        return WorkStay(user, day, float(rec["hours"]), path)
    raise ValueError(f"unknown event type {kind!r}")


@dataclass
class RawEvents:
    visits: list[VisitEvent]
    residential: list[ResidentialStay]
    work: list[WorkStay]

    def __len__(self) -> int:
        return len(self.visits) + len(self.residential) + len(self.work)

    def dates(self) -> set[dt.date]:
        return (
            {e.date for e in self.visits}
            | {e.date for e in self.residential}
            | {e.date for e in self.work}
        )

    def between(self, start: dt.date, end: dt.date) -> "RawEvents":
        """Events dated inside ``[start, end]``."""
        keep = lambda seq: [e for e in seq if start <= e.date <= end]
        return RawEvents(keep(self.visits), keep(self.residential), keep(self.work))


def save_events(events: RawEvents, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for group in (events.visits, events.residential, events.work):
            for e in group:
                fh.write(json.dumps(event_to_record(e), sort_keys=True) + "\n")


def load_events(path: str | Path) -> RawEvents:
    out = RawEvents([], [], [])
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                e = event_from_record(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed event record ({exc})") from exc
            if isinstance(e, VisitEvent):
                out.visits.append(e)
            elif isinstance(e, ResidentialStay):
                out.residential.append(e)
            else:
                out.work.append(e)
    return out


def validate_events(events: RawEvents, tree: RegionTree) -> None:
    """Check region chains, dates and one-record-per-user-day for stays."""
    checked: set[tuple] = set()

    def check(path):
        if path not in checked:
            tree.check_path(path)
            checked.add(tuple(path))

    for e in events.visits:
        check(e.region_path)
        if e.date < FIRST_METRIC_DATE:
            raise ValueError(f"visit dated {e.date} precedes {FIRST_METRIC_DATE}")
    for name, stays, path_of in (
        ("residential", events.residential, lambda s: s.region_path),
        ("work", events.work, lambda s: s.residence_region_path),
    ):
        seen: set[tuple[str, dt.date]] = set()
        for s in stays:
            check(path_of(s))
            if s.date < FIRST_METRIC_DATE:
                raise ValueError(f"{name} stay dated {s.date} precedes {FIRST_METRIC_DATE}")
            if (s.user_id, s.date) in seen:
                raise ValueError(f"duplicate {name} record for one user on {s.date}")
            seen.add((s.user_id, s.date))
