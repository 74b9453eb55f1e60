"""Laplace mechanism, per-table noise parameters, budget arithmetic and confidence intervals."""

from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable

import numpy as np


class MetricKind(str, Enum):
    VISITS = "visits"
    RESIDENTIAL_SUM = "residential_sum"
    RESIDENTIAL_COUNT = "residential_count"
    WORKPLACES = "workplaces"


@dataclass(frozen=True)
class NoiseSpec:
    """Laplace noise parameters; ``scale_b == sensitivity / epsilon``."""

    scale_b: float
    epsilon: Fraction
    sensitivity: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")
        if not math.isclose(self.scale_b * float(self.epsilon), self.sensitivity, rel_tol=1e-12):
            raise ValueError("scale_b must equal sensitivity / epsilon")

    @classmethod
    def from_budget(cls, sensitivity: float, epsilon: Fraction | float | str) -> "NoiseSpec":
        eps = Fraction(epsilon) if not isinstance(epsilon, float) else Fraction(str(epsilon))
        return cls(scale_b=float(sensitivity / eps), epsilon=eps, sensitivity=float(sensitivity))

    @property
    def stddev(self) -> float:
        return self.scale_b * math.sqrt(2.0)

    def half_width(self, coverage: float) -> float:
        return laplace_half_width(self.scale_b, coverage)


@dataclass(frozen=True)
class NoisyMetric:
    """A released value together with the public noise parameters used to make it.

    ``noise_added`` is False only in the explicit zero-noise test mode, in which
    case confidence intervals have zero width.
    """

    value: float
    noise: NoiseSpec
    kind: MetricKind
    noise_added: bool = True

    def interval(self, coverage: float) -> tuple[float, float]:
        if not self.noise_added:
            _check_coverage(coverage)
            return (self.value, self.value)
        return laplace_ci(self.value, self.noise.scale_b, coverage)

    @property
    def user_count(self) -> float:
        return self.value


# Epsilon per granularity level. Residential splits its per-level budget evenly
# between the noisy sum and the noisy count.
_LEVEL_EPSILON = {
    MetricKind.VISITS: {0: Fraction("0.11"), 1: Fraction("0.11"), 2: Fraction("0.22")},
    MetricKind.WORKPLACES: {0: Fraction("0.11"), 1: Fraction("0.11"), 2: Fraction("0.22")},
    MetricKind.RESIDENTIAL_SUM: {0: Fraction("0.055"), 1: Fraction("0.055"), 2: Fraction("0.110")},
    MetricKind.RESIDENTIAL_COUNT: {0: Fraction("0.055"), 1: Fraction("0.055"), 2: Fraction("0.110")},
}

# Residential values are offset into [-12, 12]; adding or removing one user moves the sum by <= 12.
_SENSITIVITY = {
    MetricKind.VISITS: 1.0,
    MetricKind.WORKPLACES: 1.0,
    MetricKind.RESIDENTIAL_SUM: 12.0,
    MetricKind.RESIDENTIAL_COUNT: 1.0,
}


def noise_spec_for(kind: MetricKind | str, level: int) -> NoiseSpec:
    """Noise parameters for one metric kind at one granularity level."""
    try:
        kind = MetricKind(kind)
    except ValueError:
        raise ValueError(f"unknown metric kind {kind!r}") from None
    if level not in _LEVEL_EPSILON[kind]:
        raise ValueError(f"unknown granularity level {level!r}")
    return NoiseSpec.from_budget(_SENSITIVITY[kind], _LEVEL_EPSILON[kind][level])


def derive_rng(root_seed: int, *scope: object) -> np.random.Generator:
    """Independent generator for one scope (e.g. a metric key), stable across processes."""
    digest = hashlib.sha256("\x1f".join(str(s) for s in scope).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, *words]))


_U53 = 1 << 53


def sample_laplace(scale_b: float, rng: np.random.Generator, size: int | None = None):
    """Draw Laplace(0, scale_b) by inverting the CDF of a uniform on the open interval (0, 1)."""
    if not scale_b > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale_b}")
    u = rng.integers(1, _U53, size=size) / _U53
    u = np.asarray(u, dtype=float)
    out = np.where(u < 0.5, scale_b * np.log(2.0 * u), -scale_b * np.log(2.0 * (1.0 - u)))
    return float(out) if size is None else out


def laplace_mechanism(true_value: float, spec: NoiseSpec, rng: np.random.Generator, size: int | None = None):
    return true_value + sample_laplace(spec.scale_b, rng, size)


def _check_coverage(coverage: float) -> None:
    if not 0.0 <= coverage < 1.0:
        raise ValueError(f"coverage must lie in [0, 1), got {coverage}")


def laplace_half_width(scale_b: float, coverage: float) -> float:
    """Half-width t with P(|Laplace(0, b)| <= t) = coverage, i.e. b * ln(1 / (1 - coverage))."""
    _check_coverage(coverage)
    return scale_b * math.log(1.0 / (1.0 - coverage))


def laplace_ci(noisy_value: float, scale_b: float, coverage: float) -> tuple[float, float]:
    t = laplace_half_width(scale_b, coverage)
    return (noisy_value - t, noisy_value + t)


# -- budget accounting -------------------------------------------------------

FAMILIES = ("visits", "residential", "workplaces")
_FAMILY_KINDS = {
    "visits": (MetricKind.VISITS,),
    "residential": (MetricKind.RESIDENTIAL_SUM, MetricKind.RESIDENTIAL_COUNT),
    "workplaces": (MetricKind.WORKPLACES,),
}


def level_epsilon(family: str, level: int) -> Fraction:
    """Budget consumed at one level by one contribution to ``family``."""
    if family not in _FAMILY_KINDS:
        raise ValueError(f"unknown metric family {family!r}")
    return sum((_LEVEL_EPSILON[k][level] for k in _FAMILY_KINDS[family]), Fraction(0))


@dataclass
class BudgetReport:
    per_family: dict[str, Fraction] = field(default_factory=dict)

    @property
    def total(self) -> Fraction:
        return sum(self.per_family.values(), Fraction(0))

    def __add__(self, other: "BudgetReport") -> "BudgetReport":
        merged = defaultdict(Fraction, self.per_family)
        for fam, eps in other.per_family.items():
            merged[fam] += eps
        return BudgetReport(dict(merged))

    def as_floats(self) -> dict[str, float]:
        out = {fam: float(eps) for fam, eps in sorted(self.per_family.items())}
        out["total"] = float(self.total)
        return out


def budget_report(composition: Iterable[tuple[str, int, int]]) -> BudgetReport:
    """Sequential composition over ``(family, level, contributions)`` entries.

    ``contributions`` is how many cells of that family and level one user-day
    touches, e.g. the number of retained visit pairs.
    """
    per_family: dict[str, Fraction] = defaultdict(Fraction)
    for family, level, count in composition:
        if count < 0:
            raise ValueError("contribution count must be nonnegative")
        per_family[family] += level_epsilon(family, level) * count
    return BudgetReport(dict(per_family))


def worst_case_user_day(max_pairs: int = 4) -> list[tuple[str, int, int]]:
    """Composition of a user-day that saturates every contribution bound."""
    out = []
    for level in (0, 1, 2):
        out.append(("visits", level, max_pairs))
        out.append(("residential", level, 1))
        out.append(("workplaces", level, 1))
    return out

