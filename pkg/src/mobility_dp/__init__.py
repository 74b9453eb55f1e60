"""Differentially private community mobility metrics and percent-change reports."""

from .bounding import ContributionCap, cap_contributions, dedupe_pairs
from .domain import PlaceCategory, RegionNode, RegionTree, ReportColumn, published_column_of, validate_region_tree
from .dp import NoiseSpec, NoisyMetric, budget_report, laplace_ci, noise_spec_for, sample_laplace
from .metrics import DailyMetricKey, MetricFamily, MetricStore, aggregate
from .report import ReportConfig, build_report, emit_report

__all__ = [
    "ContributionCap",
    "DailyMetricKey",
    "MetricFamily",
    "MetricStore",
    "NoiseSpec",
    "NoisyMetric",
    "PlaceCategory",
    "RegionNode",
    "RegionTree",
    "ReportColumn",
    "ReportConfig",
    "aggregate",
    "budget_report",
    "build_report",
    "cap_contributions",
    "dedupe_pairs",
    "emit_report",
    "laplace_ci",
    "noise_spec_for",
    "published_column_of",
    "sample_laplace",
    "validate_region_tree",
]
