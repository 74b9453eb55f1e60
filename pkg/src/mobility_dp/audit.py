"""Black-box empirical checks of the claimed epsilon of each mechanism.

A mechanism is run many times on two neighboring datasets, outputs are
histogrammed, and the largest log-ratio of bin frequencies is an empirical
lower bound on its privacy loss.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .bounding import ContributionCap, bound_visits, cap_contributions, dedupe_pairs
from .domain import LEVELS, PlaceCategory, ResidentialStay, VisitEvent, WorkStay
from .dp import BudgetReport, MetricKind, budget_report, derive_rng, noise_spec_for, sample_laplace
from .metrics import (
    DailyMetricKey,
    MetricFamily,
    residential_mean,
    visits_count,
    workplaces_count,
)

# mechanism(dataset, rng, size) -> array of `size` independent outputs
Mechanism = Callable[[Any, np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class NeighborPair:
    name: str
    d1: Any
    d2: Any
    mechanism: Mechanism
    claimed_epsilon: float
    cut_points: tuple[float, ...]
    level: int | None = None


@dataclass(frozen=True)
class AuditVerdict:
    mechanism: str
    level: int | None
    empirical_epsilon_lower_bound: float
    claimed: float
    trials: int
    bin_width: float
    slack: float
    passed: bool
    inconclusive: bool = False

    def to_record(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "level": self.level,
            "claimed_epsilon": self.claimed,
            "empirical_bound": self.empirical_epsilon_lower_bound,
            "slack": self.slack,
            "bin_width": self.bin_width,
            "trials": self.trials,
            "pass": self.passed,
            "inconclusive": self.inconclusive,
        }


def histogram_log_ratio(
    out1: np.ndarray, out2: np.ndarray, cut_points: Sequence[float], min_bin_count: int = 1000
) -> tuple[float, float, int]:
    """Max |log p1/p2| over bins holding at least ``min_bin_count`` in both runs.

    Returns ``(bound, slack, bins_used)``; add-one smoothing is applied to each
    bin and the slack is ``3 / sqrt(smallest count among used bins)``.
    """
    cuts = np.asarray(sorted(cut_points), dtype=float)
    nbins = len(cuts) + 1
    c1 = np.bincount(np.searchsorted(cuts, out1, side="right"), minlength=nbins)
    c2 = np.bincount(np.searchsorted(cuts, out2, side="right"), minlength=nbins)
    usable = (c1 >= min_bin_count) & (c2 >= min_bin_count)
    if usable.sum() < 2:
        return math.nan, math.nan, int(usable.sum())
    p1 = (c1 + 1) / (c1.sum() + nbins)
    p2 = (c2 + 1) / (c2.sum() + nbins)
    ratios = np.abs(np.log(p1[usable] / p2[usable]))
    slack = 3.0 / math.sqrt(min(c1[usable].min(), c2[usable].min()))
    return float(ratios.max()), slack, int(usable.sum())


def audit_mechanism(
    pair: NeighborPair,
    trials: int,
    seed: int = 0,
    *,
    min_bin_count: int = 1000,
    chunk: int = 1_000_000,
) -> AuditVerdict:
    """Histogram-ratio audit of one neighboring pair.

    Passes when the empirical bound does not exceed the claim plus slack.
    Histograms with fewer than two usable bins give an inconclusive verdict.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng1 = derive_rng(seed, "audit", pair.name, pair.level, "d1")
    rng2 = derive_rng(seed, "audit", pair.name, pair.level, "d2")

    def run(data, rng):
        parts, left = [], trials
        while left > 0:
            n = min(chunk, left)
            parts.append(np.asarray(pair.mechanism(data, rng, n), dtype=float))
            left -= n
        return np.concatenate(parts)

    out1, out2 = run(pair.d1, rng1), run(pair.d2, rng2)
    bound, slack, used = histogram_log_ratio(out1, out2, pair.cut_points, min_bin_count)
    cuts = np.sort(np.asarray(pair.cut_points, dtype=float))
    width = float(np.median(np.diff(cuts))) if len(cuts) > 1 else math.inf
    if used < 2:
        return AuditVerdict(pair.name, pair.level, math.nan, pair.claimed_epsilon, trials, width,
                            math.nan, passed=False, inconclusive=True)
    return AuditVerdict(pair.name, pair.level, bound, pair.claimed_epsilon, trials, width, slack,
                        passed=bound <= pair.claimed_epsilon + slack)


def laplace_cut_points(center1: float, center2: float, scale_b: float, tails: int = 3) -> tuple[float, ...]:
    """Cut points at the two output centers and at whole scales beyond them.

    Every bin outside ``[center1, center2]`` carries the full log-ratio, and
    the outermost bins keep enough mass for a tight estimate.
    """
    lo, hi = min(center1, center2), max(center1, center2)
    pts = {lo, hi}
    for k in range(1, tails + 1):
        pts.add(lo - k * scale_b)
        pts.add(hi + k * scale_b)
    return tuple(sorted(pts))


# -- mechanisms built from the metrics module --------------------------------

_AUDIT_DAY = dt.date(2020, 3, 2)
_PATH = ("C0", "C0-S1", "C0-S1-K1")


def _visit_users(events: Sequence[VisitEvent], level: int, key: DailyMetricKey) -> list[str]:
    bounded = bound_visits(events, ContributionCap(), root_seed=0)
    return [u for (u, _d, lvl), pairs in bounded.items()
            if lvl == level and (key.category, key.region) in pairs]


def visits_mechanism(level: int, scale_multiplier: float = 1.0) -> Mechanism:
    """Released visit count of one cell; ``scale_multiplier`` != 1 injects a miscalibrated scale."""
    key = DailyMetricKey(_PATH[level], _AUDIT_DAY, MetricFamily.VISITS, PlaceCategory.PARKS)
    scale = noise_spec_for(MetricKind.VISITS, level).scale_b * scale_multiplier

    def mech(events, rng, size):
        raw = visits_count(_visit_users(events, level, key), key, level, None, add_noise=False).value
        return raw + sample_laplace(scale, rng, size)

    return mech


def workplaces_mechanism(level: int, scale_multiplier: float = 1.0) -> Mechanism:
    scale = noise_spec_for(MetricKind.WORKPLACES, level).scale_b * scale_multiplier

    def mech(stays, rng, size):
        raw = workplaces_count(stays, level, None, add_noise=False).value
        return raw + sample_laplace(scale, rng, size)

    return mech


def residential_mechanism(level: int, part: MetricKind, scale_multiplier: float = 1.0) -> Mechanism:
    """One component (noisy sum or noisy count) of the residential mean."""
    scale = noise_spec_for(part, level).scale_b * scale_multiplier

    def mech(stays, rng, size):
        m = residential_mean(stays, level, None, add_noise=False)
        raw = (m.noisy_sum if part is MetricKind.RESIDENTIAL_SUM else m.noisy_count).value
        return raw + sample_laplace(scale, rng, size)

    return mech


def _visit(user: str, cat: PlaceCategory, path=_PATH) -> VisitEvent:
    return VisitEvent(user, _AUDIT_DAY, cat, path)


def visits_pair(level: int, scale_multiplier: float = 1.0, background: int = 500) -> NeighborPair:
    """Worst case: the extra user adds exactly one to the audited cell."""
    d1 = [_visit(f"u{i}", PlaceCategory.PARKS) for i in range(background)]
    d2 = d1 + [_visit("target", PlaceCategory.PARKS)]
    spec = noise_spec_for(MetricKind.VISITS, level)
    return NeighborPair(
        f"visits{'-broken' if scale_multiplier != 1 else ''}", d1, d2,
        visits_mechanism(level, scale_multiplier), float(spec.epsilon),
        laplace_cut_points(background, background + 1, spec.scale_b), level,
    )


def workplaces_pair(level: int, scale_multiplier: float = 1.0, background: int = 200) -> NeighborPair:
    d1 = [WorkStay(f"u{i}", _AUDIT_DAY, 8.0, _PATH) for i in range(background)]
    d2 = d1 + [WorkStay("target", _AUDIT_DAY, 8.0, _PATH)]
    spec = noise_spec_for(MetricKind.WORKPLACES, level)
    return NeighborPair(
        f"workplaces{'-broken' if scale_multiplier != 1 else ''}", d1, d2,
        workplaces_mechanism(level, scale_multiplier), float(spec.epsilon),
        laplace_cut_points(background, background + 1, spec.scale_b), level,
    )


def residential_pair(level: int, part: MetricKind, scale_multiplier: float = 1.0,
                     background: int = 200) -> NeighborPair:
    """The extra user spends 24 hours at home, the extreme offset value of +12."""
    d1 = [ResidentialStay(f"u{i}", _AUDIT_DAY, 12.0, _PATH) for i in range(background)]
    d2 = d1 + [ResidentialStay("target", _AUDIT_DAY, 24.0, _PATH)]
    spec = noise_spec_for(part, level)
    if part is MetricKind.RESIDENTIAL_SUM:
        c1, c2 = 0.0, 12.0
    else:
        c1, c2 = float(background), float(background + 1)
    return NeighborPair(
        f"{part.value}{'-broken' if scale_multiplier != 1 else ''}", d1, d2,
        residential_mechanism(level, part, scale_multiplier), float(spec.epsilon),
        laplace_cut_points(c1, c2, spec.scale_b), level,
    )


def default_suite(scale_multiplier: float = 1.0) -> list[NeighborPair]:
    pairs = []
    for level in LEVELS:
        pairs.append(visits_pair(level, scale_multiplier))
        pairs.append(workplaces_pair(level, scale_multiplier))
        pairs.append(residential_pair(level, MetricKind.RESIDENTIAL_SUM, scale_multiplier))
        pairs.append(residential_pair(level, MetricKind.RESIDENTIAL_COUNT, scale_multiplier))
    return pairs


# -- full visits pipeline at day level ---------------------------------------

def fourteen_pair_user(user: str = "target") -> list[VisitEvent]:
    """A user visiting all 7 categories in each of two countries on one day."""
    events = []
    for path in (("C0", "C0-S1", "C0-S1-K1"), ("C1", "C1-S1", "C1-S1-K1")):
        for cat in PlaceCategory:
            events.append(VisitEvent(user, _AUDIT_DAY, cat, path))
    return events


def visits_pipeline_mechanism(cap: ContributionCap = ContributionCap()) -> Mechanism:
    """Dedupe, cap, count and noise every cell the 14-pair user could touch.

    The scalar output is the scale-weighted sum of those released cells, a
    post-processing of the day's visits release.
    """
    target_cells = {(ev.category, ev.region_path[level], level) for level in LEVELS for ev in fourteen_pair_user()}
    cells = sorted(target_cells, key=lambda c: (c[2], c[1], c[0].value))
    index = {c: i for i, c in enumerate(cells)}
    scales = np.array([noise_spec_for(MetricKind.VISITS, c[2]).scale_b for c in cells])

    def mech(events, rng, size):
        by_user: dict[str, list[VisitEvent]] = {}
        for e in events:
            by_user.setdefault(e.user_id, []).append(e)
        fixed = np.zeros(len(cells))
        random_users = []
        for evs in by_user.values():
            per_level = [dedupe_pairs(evs, lvl) for lvl in LEVELS]
            if any(len(p) > cap.max_pairs for p in per_level):
                random_users.append(per_level)
                continue
            for lvl, pairs in zip(LEVELS, per_level):
                for cat, region in pairs:
                    if (cat, region, lvl) in index:
                        fixed[index[(cat, region, lvl)]] += 1
        counts = np.tile(fixed, (size, 1))
        for t in range(size):
            for per_level in random_users:
                for lvl, pairs in zip(LEVELS, per_level):
                    for cat, region in cap_contributions(pairs, cap, rng):
                        counts[t, index[(cat, region, lvl)]] += 1
        noise = sample_laplace(1.0, rng, size * len(cells)).reshape(size, len(cells)) * scales
        return ((counts + noise) / scales).sum(axis=1)

    return mech


def visits_pipeline_pair(background: int = 50) -> NeighborPair:
    others = []
    for i in range(background):
        for ev in fourteen_pair_user(f"bg{i}")[:3]:
            others.append(ev)
    d2 = others + fourteen_pair_user()
    mech = visits_pipeline_mechanism()
    # the statistic is the sum of 42 unit-scale Laplace draws around the D1 counts
    center = float(np.mean(mech(others, np.random.default_rng(0), 2000)))
    sd = math.sqrt(2.0 * 42)
    claimed = float(budget_report([("visits", lvl, 4) for lvl in LEVELS]).total)
    cuts = tuple(center + sd * k for k in np.linspace(-2.0, 2.5, 10))
    return NeighborPair("visits-pipeline-day", others, d2, mech, claimed, cuts, None)


# -- composition ledger ------------------------------------------------------

@dataclass
class CompositionLedger:
    entries: list[tuple[str, int, int, Fraction]] = field(default_factory=list)

    @property
    def report(self) -> BudgetReport:
        return budget_report((fam, lvl, n) for fam, lvl, n, _ in self.entries)

    @property
    def total(self) -> Fraction:
        return sum((eps for *_, eps in self.entries), Fraction(0))


def audit_composition(
    visits: Iterable[VisitEvent] = (),
    residential: Iterable[ResidentialStay] = (),
    work: Iterable[WorkStay] = (),
    *,
    cap: ContributionCap = ContributionCap(),
    seed: int = 0,
) -> CompositionLedger:
    """Budget a single user's day actually consumes after bounding.

    Stays are charged whether or not they change a count, since the
    mechanism runs either way.
    """
    visits, residential, work = list(visits), list(residential), list(work)
    users = {e.user_id for e in (*visits, *residential, *work)}
    days = {e.date for e in (*visits, *residential, *work)}
    if len(users) > 1 or len(days) > 1:
        raise ValueError("audit_composition takes one user's records for one day")
    ledger = CompositionLedger()
    bounded = bound_visits(visits, cap, seed)
    for level in LEVELS:
        kept = sum(len(p) for (_u, _d, lvl), p in bounded.items() if lvl == level)
        if kept:
            ledger.entries.append(("visits", level, kept, budget_report([("visits", level, kept)]).total))
        for family, stays in (("residential", residential), ("workplaces", work)):
            if stays:
                ledger.entries.append((family, level, 1, budget_report([(family, level, 1)]).total))
    return ledger


def run_suite(pairs: Iterable[NeighborPair], trials: int, seed: int = 0) -> list[AuditVerdict]:
    return [audit_mechanism(p, trials, seed) for p in pairs]


def save_verdicts(verdicts: Iterable[AuditVerdict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_record(), sort_keys=True) + "\n")
