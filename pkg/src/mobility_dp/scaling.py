"""Scaling factors that reconcile a metric-logic change with already released baselines.

For a group of cells on which the change acts uniformly, the sum of the old
released values ``s_g`` is compared with a freshly noised sum of the
recomputed values ``s_n``. Only the second sum spends budget, and it spends a
fraction of one cell's budget regardless of the group size.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import PlaceCategory, RegionTree
from .dp import MetricKind, NoiseSpec, noise_spec_for, sample_laplace
from .metrics import DailyMetricKey, MetricFamily, MetricStore, date_range
from .report import WEEKDAYS

_FAMILY_KIND = {MetricFamily.VISITS: MetricKind.VISITS, MetricFamily.WORKPLACES: MetricKind.WORKPLACES}
# cells of one family and level a single user can touch in one day
_PER_DAY_BOUND = {MetricFamily.VISITS: 4, MetricFamily.WORKPLACES: 1}


class Direction(str, Enum):
    SCALE_BASELINE = "scale_baseline"
    SCALE_DAILY = "scale_daily"


class UnusableFactorError(ValueError):
    pass


@dataclass(frozen=True)
class MetricGroup:
    group_id: str
    family: MetricFamily
    level: int
    members: frozenset[DailyMetricKey]
    period: tuple[dt.date, dt.date]

    def __post_init__(self):
        if self.family not in _FAMILY_KIND:
            raise ValueError(f"scaling groups support visits and workplaces, not {self.family.value}")
        if any(k.family is not self.family for k in self.members):
            raise ValueError(f"group {self.group_id}: members must share family {self.family.value}")
        start, end = self.period
        if any(not start <= k.date <= end for k in self.members):
            raise ValueError(f"group {self.group_id}: member outside the group period")

    def sorted_members(self) -> list[DailyMetricKey]:
        return sorted(self.members, key=DailyMetricKey.sort_key)


@dataclass(frozen=True)
class GroupSpec:
    """One line of the group configuration file."""

    group_id: str
    family: MetricFamily
    level: int
    period: tuple[dt.date, dt.date]
    regions: tuple[str, ...] | None = None
    weekdays: tuple[int, ...] | None = None
    categories: tuple[PlaceCategory, ...] | None = None

    @classmethod
    def from_record(cls, rec: Mapping) -> "GroupSpec":
        def opt(name, conv):
            v = rec.get(name)
            return None if v is None else tuple(conv(x) for x in v)

        return cls(
            group_id=str(rec["group_id"]),
            family=MetricFamily(rec["family"]),
            level=int(rec["level"]),
            period=(dt.date.fromisoformat(rec["start"]), dt.date.fromisoformat(rec["end"])),
            regions=opt("regions", str),
            weekdays=opt("weekdays", lambda w: WEEKDAYS.index(str(w).lower())),
            categories=opt("categories", PlaceCategory),
        )

    def expand(self, tree: RegionTree) -> MetricGroup:
        regions = [r.id for r in tree.at_level(self.level) if self.regions is None or r.id in self.regions]
        if self.regions is not None:
            missing = set(self.regions) - set(regions)
            if missing:
                raise ValueError(f"group {self.group_id}: no level-{self.level} region {sorted(missing)[0]!r}")
        days = [d for d in date_range(*self.period) if self.weekdays is None or d.weekday() in self.weekdays]
        if self.family is MetricFamily.VISITS:
            cats: Sequence[PlaceCategory | None] = self.categories or tuple(PlaceCategory)
        else:
            cats = (None,)
        members = frozenset(
            DailyMetricKey(r, d, self.family, c) for r in regions for d in days for c in cats
        )
        return MetricGroup(self.group_id, self.family, self.level, members, self.period)


def load_group_specs(path: str | Path) -> list[GroupSpec]:
    with open(path, encoding="utf-8") as fh:
        return [GroupSpec.from_record(json.loads(line)) for line in fh if line.strip()]


def old_noisy_sum(store: MetricStore, group: MetricGroup) -> float:
    """Plain sum of the already released cells; costs no budget."""
    if not group.members:
        raise ValueError(f"group {group.group_id} has no members")
    total = []
    for key in group.sorted_members():
        if key not in store:
            raise KeyError(f"group {group.group_id}: store lacks {key}")
        total.append(store[key].value)
    return math.fsum(total)


def group_sensitivity(group: MetricGroup) -> float:
    """Largest change one user can make to the raw group sum.

    Per day a user touches at most ``min(members that day, per-day bound)``
    cells of one family and level, each by the cell sensitivity.
    """
    cell = noise_spec_for(_FAMILY_KIND[group.family], group.level).sensitivity
    per_day = Counter(k.date for k in group.members)
    bound = _PER_DAY_BOUND[group.family]
    return cell * sum(min(n, bound) for n in per_day.values())


def new_noisy_sum(
    recomputed: Mapping[DailyMetricKey, float],
    group: MetricGroup,
    budget_fraction: float,
    rng: np.random.Generator | None,
    *,
    sensitivity: float | None = None,
    add_noise: bool = True,
) -> tuple[float, NoiseSpec]:
    """Sum of recomputed raw values plus Laplace noise at ``budget_fraction`` of the level's epsilon."""
    if not 0 < budget_fraction <= 1:
        raise ValueError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    if not group.members:
        raise ValueError(f"group {group.group_id} has no members")
    missing = [k for k in group.members if k not in recomputed]
    if missing:
        raise KeyError(f"group {group.group_id}: recomputed values lack {min(missing, key=DailyMetricKey.sort_key)}")
    eps = Fraction(str(budget_fraction)) * noise_spec_for(_FAMILY_KIND[group.family], group.level).epsilon
    spec = NoiseSpec.from_budget(group_sensitivity(group) if sensitivity is None else sensitivity, eps)
    raw = math.fsum(float(recomputed[k]) for k in group.sorted_members())
    if not add_noise:
        return raw, spec
    return raw + sample_laplace(spec.scale_b, rng), spec


@dataclass(frozen=True)
class ScalingFactor:
    group_id: str
    s_g: float
    s_n: float
    budget_fraction: float = 0.10
    epsilon_spent: Fraction = Fraction(0)
    noise_scale: float = 0.0

    @property
    def usable(self) -> bool:
        return self.s_g > 0 and self.s_n > 0

    @property
    def factor(self) -> float:
        if not self.usable:
            raise UnusableFactorError(f"group {self.group_id}: s_g={self.s_g}, s_n={self.s_n}")
        return self.s_n / self.s_g

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "s_g": self.s_g,
            "s_n": self.s_n,
            "factor": self.s_n / self.s_g if self.usable else None,
            "usable": self.usable,
            "budget_fraction": self.budget_fraction,
            "epsilon_spent": str(float(self.epsilon_spent)),
            "noise_scale": self.noise_scale,
        }


def compute_factor(
    store: MetricStore,
    recomputed: Mapping[DailyMetricKey, float],
    group: MetricGroup,
    budget_fraction: float,
    rng: np.random.Generator | None,
    *,
    sensitivity: float | None = None,
    add_noise: bool = True,
) -> ScalingFactor:
    s_g = old_noisy_sum(store, group)
    s_n, spec = new_noisy_sum(
        recomputed, group, budget_fraction, rng, sensitivity=sensitivity, add_noise=add_noise
    )
    return ScalingFactor(group.group_id, s_g, s_n, budget_fraction, spec.epsilon if add_noise else Fraction(0),
                         spec.scale_b)


def apply_scaling(value: float, factor: ScalingFactor | float, direction: Direction | str) -> float:
    """Multiply by ``s_n / s_g`` when scaling the baseline, by its inverse when scaling daily values."""
    f = factor.factor if isinstance(factor, ScalingFactor) else float(factor)
    if not f > 0:
        raise UnusableFactorError(f"factor {f} is not positive")
    if Direction(direction) is Direction.SCALE_BASELINE:
        return value * f
    return value / f


def compose(factors: Iterable[ScalingFactor | float]) -> float:
    """Successive rollouts compound multiplicatively."""
    out = 1.0
    for f in factors:
        out *= f.factor if isinstance(f, ScalingFactor) else float(f)
    return out


def save_factors(factors: Iterable[ScalingFactor], path: str | Path) -> None:
    factors = list(factors)
    with open(path, "w", encoding="utf-8") as fh:
        for f in factors:
            fh.write(json.dumps(f.to_record(), sort_keys=True) + "\n")
        total = sum((f.epsilon_spent for f in factors), Fraction(0))
        fh.write(json.dumps({"total_epsilon_spent": str(float(total)), "groups": len(factors)}, sort_keys=True) + "\n")
