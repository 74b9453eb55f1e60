import datetime as dt
import statistics

import pytest

from mobility_dp.bounding import ContributionCap, bound_visits
from mobility_dp.domain import PlaceCategory, ReportColumn, categories_of
from mobility_dp.metrics import DailyMetricKey, MetricFamily, aggregate
from mobility_dp.synth import ScenarioConfig, generate


def small(**kw):
    base = dict(users_per_region=60, start=dt.date(2020, 1, 1), end=dt.date(2020, 2, 29),
                cutover=dt.date(2020, 2, 10), seed=11)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def lockdown():
    return generate(small(
        users_per_region=150,
        lockdown_multipliers={PlaceCategory.PARKS: 0.5},
        residential_mean_after=14.0,
        work_rate_after=0.3,
    ))


def test_same_seed_same_events():
    a, b = generate(small(users_per_region=10)), generate(small(users_per_region=10))
    assert a.events == b.events
    assert a.truth == b.truth
    c = generate(small(users_per_region=10, seed=12))
    assert c.events.visits != a.events.visits


def _after_mean(data, region, column, start=dt.date(2020, 2, 10)):
    rows = [r for r in data.truth if r.region == region and r.column is column and r.date >= start]
    return statistics.fmean(r.percent_change for r in rows)


def test_halved_rate_shows_minus_fifty(lockdown):
    assert _after_mean(lockdown, "XA", ReportColumn.PARKS) == pytest.approx(-50, abs=4)


def test_untouched_category_stays_flat(lockdown):
    assert _after_mean(lockdown, "XA", ReportColumn.TRANSIT_STATIONS) == pytest.approx(0, abs=4)


def test_residential_shift(lockdown):
    assert _after_mean(lockdown, "XA", ReportColumn.RESIDENTIAL) == pytest.approx(100 * (14 / 12 - 1), abs=1)


def test_workplaces_halved_on_weekdays(lockdown):
    rows = [r for r in lockdown.truth if r.region == "XA" and r.column is ReportColumn.WORKPLACES
            and r.date >= dt.date(2020, 2, 10) and r.date.weekday() < 5]
    assert statistics.fmean(r.percent_change for r in rows) == pytest.approx(-50, abs=5)


def test_zero_users_still_has_rows():
    data = generate(small(users_per_region=0))
    assert not data.events.visits and not data.events.residential
    assert len(data.truth) == 7 * len(data.dates) * 6
    parks = [r for r in data.truth if r.column is ReportColumn.PARKS]
    assert all(r.value == 0 and r.percent_change is None for r in parks)
    assert all(r.value is None for r in data.truth if r.column is ReportColumn.RESIDENTIAL)


@pytest.mark.parametrize("field, value", [
    ("users_per_region", -1),
    ("travel_prob", 1.5),
    ("end", dt.date(2020, 1, 20)),
])
def test_invalid_scenarios(field, value):
    with pytest.raises(ValueError):
        small(**{field: value}).validate()


def test_rate_times_multiplier_over_one():
    with pytest.raises(ValueError, match="exceeds 1"):
        small(lockdown_multipliers={PlaceCategory.PARKS: 6.0}).validate()


def test_round_trip_dict():
    cfg = small(lockdown_multipliers={PlaceCategory.TRANSIT: 0.2})
    again = ScenarioConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError, match="unknown"):
        ScenarioConfig.from_dict({"regions": "toy", "colour": 1})


def test_truth_matches_noiseless_pipeline_when_cap_slack():
    rates = {PlaceCategory.PARKS: 0.5, PlaceCategory.GROCERIES: 0.4, PlaceCategory.RETAIL: 0.3,
             PlaceCategory.TRANSIT: 0.2}
    data = generate(small(users_per_region=30, visit_rates=rates, travel_prob=0.0))
    bounded = bound_visits(data.events.visits, ContributionCap(), 0)
    assert max(len(p) for p in bounded.values()) <= 4
    store = aggregate(data.tree, data.events, data.dates, 5, add_noise=False)
    truth = data.truth_table()
    for region in data.tree:
        for day in data.dates[::7]:
            for column in ReportColumn:
                t = truth[(region.id, day, column)].value
                if column is ReportColumn.RESIDENTIAL:
                    got = store[DailyMetricKey(region.id, day, MetricFamily.RESIDENTIAL)].value
                    assert got == pytest.approx(t)
                elif column is ReportColumn.WORKPLACES:
                    assert store[DailyMetricKey(region.id, day, MetricFamily.WORKPLACES)].value == t
                else:
                    got = sum(store[DailyMetricKey(region.id, day, MetricFamily.VISITS, c)].value
                              for c in categories_of(column))
                    assert got == t
