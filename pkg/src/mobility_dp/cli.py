"""Command line entry point: generate, aggregate, report, audit, scale.

Exit codes: 0 success, 1 validation or usage error, 2 audit failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import audit as audit_mod
from .bounding import ContributionCap
from .domain import RegionTreeError, load_events, load_regions, save_events, save_regions
from .metrics import MetricStore, aggregate, date_range
from .report import MergeResult, ReportConfig, build_report, merge_small_regions, write_report
from .scaling import compute_factor, load_group_specs, save_factors
from .dp import derive_rng
from .synth import ScenarioConfig, generate, save_ground_truth

log = logging.getLogger("mobility_dp")

EXIT_OK, EXIT_INVALID, EXIT_AUDIT_FAILED = 0, 1, 2


@dataclass
class PipelineConfig:
    seed: int = 0
    add_noise: bool = True
    max_pairs: int = 4
    report: ReportConfig = field(default_factory=ReportConfig)


def _date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {s!r}") from None


def _report_config(args) -> ReportConfig:
    defaults = ReportConfig()
    return ReportConfig(
        baseline_start=args.baseline_start or defaults.baseline_start,
        baseline_end=args.baseline_end or defaults.baseline_end,
        coverage=args.coverage,
        max_deviation_pp=args.max_deviation_pp,
        min_area_km2=args.min_area_km2,
        min_users=args.min_users,
    )


def cmd_generate(args) -> int:
    config = ScenarioConfig.load(args.scenario)
    if args.seed is not None:
        config.seed = args.seed
    data = generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_regions(data.tree, out / "regions.jsonl")
    save_events(data.events, out / "events.jsonl")
    save_ground_truth(data.truth, out / "ground_truth.jsonl")
    log.info("wrote %d events for %d regions to %s", len(data.events), len(data.tree), out)
    return EXIT_OK


def cmd_aggregate(args) -> int:
    if args.disable_noise and not args.unsafe:
        raise ValueError("--disable-noise requires --unsafe; noiseless output is not private")
    tree = load_regions(args.regions)
    events = load_events(args.events)
    if args.merge_small:
        if not args.merged_regions_out:
            raise ValueError("--merge-small requires --merged-regions-out")
        neighbors = json.loads(Path(args.neighbors).read_text()) if args.neighbors else None
        merge: MergeResult = merge_small_regions(tree, min_area_km2=args.min_area_km2, neighbors=neighbors)
        events = merge.remap(events, tree)
        tree = merge.apply(tree)
        save_regions(tree, args.merged_regions_out)
    event_dates = events.dates()
    start = args.start or dt.date(2020, 1, 1)
    end = args.end or (max(event_dates) if event_dates else ReportConfig().baseline_end)
    windowed = events.between(start, end)
    if len(windowed) < len(events):
        log.info("dropped %d events outside %s..%s", len(events) - len(windowed), start, end)
    events = windowed
    config = PipelineConfig(seed=args.seed, add_noise=not args.disable_noise, max_pairs=args.max_pairs)
    store = aggregate(
        tree, events, date_range(start, end), config.seed,
        cap=ContributionCap(config.max_pairs), add_noise=config.add_noise,
    )
    store.save(args.out)
    log.info("wrote %d metric cells to %s", len(store), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    tree = load_regions(args.regions)
    store = MetricStore.load(args.store)
    config = _report_config(args)
    dates = None
    if args.start or args.end:
        all_dates = store.dates()
        start = args.start or all_dates[0]
        end = args.end or all_dates[-1]
        dates = date_range(start, end)
    cells = build_report(store, tree, config, dates)
    csv_path, log_path = write_report(cells, tree, args.out_dir)
    suppressed = sum(1 for c in cells if not c.published)
    log.info("wrote %s (%d of %d cells suppressed, see %s)", csv_path, suppressed, len(cells), log_path)
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.trials <= 0:
        raise ValueError("--trials must be positive")
    multiplier = 0.5 if args.inject_broken_scale else 1.0
    verdicts = audit_mod.run_suite(audit_mod.default_suite(multiplier), args.trials, args.seed)
    if args.out:
        audit_mod.save_verdicts(verdicts, args.out)
    failed = False
    for v in verdicts:
        status = "INCONCLUSIVE" if v.inconclusive else ("PASS" if v.passed else "FAIL")
        print(f"{status:12s} {v.mechanism:24s} level={v.level} claimed={v.claimed:.4f} "
              f"empirical={v.empirical_epsilon_lower_bound:.4f} slack={v.slack:.4f}")
        failed |= not v.passed and not v.inconclusive
    return EXIT_AUDIT_FAILED if failed else EXIT_OK


def cmd_scale(args) -> int:
    tree = load_regions(args.regions)
    store = MetricStore.load(args.store)
    recomputed_store = MetricStore.load(args.recomputed)
    recomputed = {k: m.value for k, m in recomputed_store.counts.items()}
    factors = []
    for spec in load_group_specs(args.groups):
        group = spec.expand(tree)
        rng = derive_rng(args.seed, "scaling", group.group_id)
        factors.append(compute_factor(store, recomputed, group, args.budget_fraction, rng))
    save_factors(factors, args.out)
    for f in factors:
        shown = f"{f.s_n / f.s_g:.6f}" if f.usable else "unusable"
        print(f"{f.group_id}: s_g={f.s_g:.3f} s_n={f.s_n:.3f} factor={shown} epsilon={float(f.epsilon_spent):g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobility-dp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="synthesize raw events and ground truth")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("aggregate", help="bound, aggregate and noise raw events into a metric store")
    p.add_argument("--regions", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True, help="metric store file (JSON lines)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=_date)
    p.add_argument("--end", type=_date)
    p.add_argument("--max-pairs", type=int, default=4)
    p.add_argument("--merge-small", action="store_true", help="merge sub-threshold level-2 siblings first")
    p.add_argument("--merged-regions-out", help="where to write the merged region file")
    p.add_argument("--neighbors", help="JSON object mapping small regions to cross-parent merge targets")
    p.add_argument("--min-area-km2", type=float, default=3.0)
    p.add_argument("--disable-noise", action="store_true", help="test mode only")
    p.add_argument("--unsafe", action="store_true", help="acknowledge that --disable-noise is not private")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("report", help="percent changes from a metric store")
    p.add_argument("--regions", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--start", type=_date)
    p.add_argument("--end", type=_date)
    p.add_argument("--baseline-start", type=_date)
    p.add_argument("--baseline-end", type=_date)
    p.add_argument("--coverage", type=float, default=0.975)
    p.add_argument("--max-deviation-pp", type=float, default=10.0)
    p.add_argument("--min-area-km2", type=float, default=3.0)
    p.add_argument("--min-users", type=float, default=100.0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="empirical epsilon audit of every mechanism")
    p.add_argument("--trials", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="audit records (JSON lines)")
    p.add_argument("--inject-broken-scale", action="store_true", help="halve every noise scale")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("scale", help="scaling factors for a metric-logic change")
    p.add_argument("--regions", required=True)
    p.add_argument("--store", required=True, help="released store from the old logic")
    p.add_argument("--recomputed", required=True, help="noiseless store from the new logic")
    p.add_argument("--groups", required=True, help="group definitions (JSON lines)")
    p.add_argument("--out", required=True, help="factor ledger (JSON lines)")
    p.add_argument("--budget-fraction", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_scale)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RegionTreeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
