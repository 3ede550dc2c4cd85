"""Command-line entry points: cohort generation, planning, refinement, trace
analysis, paired statistics, and the review server. Report-producing commands
write figures next to their CSV outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import agent, figures, stats, traces
from .cases import CohortSpec, generate_synthetic_case, sample_cohort, save_case, load_case
from .dose import compose_dose, compute_influence
from .metrics import (
    compute_dvh,
    compute_metrics,
    default_goals,
    write_metrics_csv,
)
from .policies import make_policy
from .prompts import STANDARD_REFINEMENT_TEXT
from .review import SERVICE_DVH_BIN_GY, create_app
from .store import SessionStore
from .traces import MarkerLexicon

logger = logging.getLogger(__name__)


def _load_cohort_spec(path: str | None) -> CohortSpec:
    if path is None:
        return CohortSpec()
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("cohort spec file must be a JSON object")
    known = {f.name for f in fields(CohortSpec)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown cohort spec fields: {sorted(unknown)} (known: {sorted(known)})")
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in doc.items()
    }
    return replace(CohortSpec(), **kwargs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate_cases(args: argparse.Namespace) -> int:
    cohort = _load_cohort_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = sample_cohort(cohort, count=args.count, seed=args.seed)
    manifest = []
    for case in cases:
        path = save_case(case, out / f"{case.id}.json")
        ptv_cc = float(case.ptv.mask.sum()) * case.grid.voxel_volume_cc
        manifest.append({"id": case.id, "file": path.name, "ptv_cc": round(ptv_cc, 4)})
        logger.info("wrote %s (PTV %.2f cc)", path, ptv_cc)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"generated {len(cases)} cases in {out}")
    return 0


def _write_session_report(store: SessionStore, session_id: str) -> Path:
    """metrics + DVH tables and the DVH figure for every reviewed round."""
    session = store.load_session(session_id)
    case = store.load_case(session_id)
    report_dir = store.path(session_id) / "report"
    report_dir.mkdir(exist_ok=True)

    influence = compute_influence(case)
    rows = []
    dvh_rows = []
    per_round_curves = {}
    for round_number, index in sorted(session.selected.items()):
        record = session.selected_record(round_number)
        if record.weights is None or record.metrics is None:
            continue
        rows.append((case.id, f"round{round_number}", record.metrics))
        dose = compose_dose(influence, record.weights)
        curves = {}
        for structure in sorted(case.structures, key=lambda s: s.name):
            if not structure.mask.any():
                continue
            curve = compute_dvh(dose, structure, SERVICE_DVH_BIN_GY)
            curves[structure.name] = curve.to_dict()
            for t, f in zip(curve.thresholds_gy, curve.fractions):
                dvh_rows.append((round_number, structure.name, float(t), float(f)))
        per_round_curves[round_number] = curves

    write_metrics_csv(report_dir / "metrics.csv", rows)
    with (report_dir / "dvh.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "structure", "dose_gy", "volume_fraction"])
        for row in dvh_rows:
            writer.writerow([row[0], row[1], f"{row[2]:.10g}", f"{row[3]:.10g}"])
    for round_number, curves in per_round_curves.items():
        figures.render_dvh(
            curves,
            case.prescription_gy,
            report_dir / f"dvh_round{round_number}.png",
            title=f"{case.id} round {round_number}",
        )
    return report_dir


def cmd_plan(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    policy = make_policy(args.policy)
    goals = default_goals(prescription_gy=case.prescription_gy)
    store = SessionStore(args.out)
    runner = agent.SessionRunner(
        case,
        policy,
        goals,
        max_iter=args.max_iterations,
        trace_sink=store.trace_sink(case.id),
    )
    session = runner.run()
    store.save(session, runner.case)
    report_dir = _write_session_report(store, session.id)
    best = session.selected_record(session.round)
    passed = best.goal_report.passed_count() if best.goal_report else 0
    total = len(goals)
    print(
        f"session {session.id}: {session.status.value} after {len(session.iterations)} iteration(s), "
        f"{passed}/{total} goals met; report in {report_dir}"
    )
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    session_dir = Path(args.session)
    store = SessionStore(session_dir.parent)
    session_id = session_dir.name
    session = store.load_session(session_id)
    case = store.load_case(session_id)
    policy = make_policy(args.policy or session.policy_name)
    runner = agent.SessionRunner.resume(
        session, case, policy, trace_sink=store.trace_sink(session_id)
    )
    runner.refine(args.text)
    store.save(runner.session, runner.case)
    report_dir = _write_session_report(store, session_id)
    print(
        f"session {session_id}: {runner.session.status.value}, round {runner.session.round}; "
        f"report in {report_dir}"
    )
    return 0


def cmd_analyze_traces(args: argparse.Namespace) -> int:
    lexicon = MarkerLexicon.from_file(args.lexicon) if args.lexicon else MarkerLexicon.default()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    analyses = traces.analyze_logs(args.logs, lexicon)
    if not analyses:
        print(f"no trace files under {args.logs}", file=sys.stderr)
        return 1
    traces.write_counts_csv(analyses, out / "counts.csv")

    sample = traces.sample_for_review(analyses, fraction=args.sample_fraction, seed=args.seed)
    traces.write_review_sample(sample, out / "review_sample.csv")

    if args.compare_with:
        analyses_b = traces.analyze_logs(args.compare_with, lexicon)
        comparison = traces.compare_variants(analyses, analyses_b)
        traces.write_comparison_csv(comparison, out / "comparison.csv")
        figures.render_category_counts(
            comparison, Path(args.logs).name or "a", Path(args.compare_with).name or "b",
            out / "categories.png",
        )
    else:
        totals = {
            c.value: sum(a.category_counts.get(c, 0) for a in analyses)
            for c in traces.CognitiveCategory
        }
        figures.render_single_variant_counts(totals, out / "categories.png")

    summary = {
        "sessions": len(analyses),
        "total_instances": sum(a.total_instances for a in analyses),
        "format_errors": sum(a.format_error_count for a in analyses),
        "sampled_for_review": len(sample),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"analyzed {len(analyses)} session trace(s); outputs in {out}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    from .metrics import read_metrics_csv

    table_a = read_metrics_csv(args.a)
    table_b = read_metrics_csv(args.b)
    families = stats.load_families_config(args.families) if args.families else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = stats.endpoint_family_analysis(
        table_a, table_b, families=families, n_boot=args.n_boot, seed=args.seed
    )
    stats.write_family_results_csv(results, out / "results.csv")
    (out / "results.json").write_text(stats.family_results_to_json(results))
    figures.render_paired_differences(results, out / "differences.png")

    plot_dir = out / "plot_data"
    plot_dir.mkdir(exist_ok=True)
    tables = {"a": table_a, "b": table_b}
    for family in results:
        for endpoint in family.endpoints:
            stats.write_plot_data_csv(tables, endpoint.endpoint, plot_dir / f"{endpoint.endpoint}.csv")
            points, _ = stats.emit_plot_data(tables, endpoint.endpoint)
            figures.render_group_distributions(points, endpoint.endpoint, plot_dir / f"{endpoint.endpoint}.png")

    flagged = [e.endpoint for f in results for e in f.endpoints if e.significant]
    print(f"analyzed {sum(len(f.endpoints) for f in results)} endpoints; "
          f"significant after FDR: {flagged if flagged else 'none'}; outputs in {out}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    store = SessionStore(args.store)
    app = create_app(
        store,
        allow_multiple_refinements=args.allow_multiple_refinements,
        static_dir=args.static,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srsplan",
        description="Synthetic radiosurgery planning: cohort generation, agentic "
        "inverse planning, trace analysis, paired statistics, and plan review.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-cases", help="sample a synthetic cranial cohort")
    p.add_argument("--spec", help="JSON file overriding cohort sampling defaults")
    p.add_argument("--out", required=True, help="output directory for case files")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_cases)

    p = sub.add_parser("plan", help="run a round-1 planning session on one case")
    p.add_argument("--case", required=True, help="case JSON file")
    p.add_argument("--policy", default="scripted",
                   choices=["scripted", "scripted-reasoning", "scripted-terse", "remote"])
    p.add_argument("--out", required=True, help="session store directory")
    p.add_argument("--max-iterations", type=int, default=agent.MAX_ITERATIONS)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("refine", help="run the refinement round on a stored session")
    p.add_argument("--session", required=True, help="session directory (<store>/<session-id>)")
    p.add_argument("--text", default=STANDARD_REFINEMENT_TEXT,
                   help="reviewer feedback (defaults to the standard conformity prompt)")
    p.add_argument("--policy", help="override the stored policy name")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("analyze-traces", help="classify rationale text in trace logs")
    p.add_argument("--logs", required=True, help="directory of trace JSONL files")
    p.add_argument("--lexicon", help="marker lexicon JSON (default: built-in)")
    p.add_argument("--sample-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--compare-with", help="second log directory for variant comparison")
    p.set_defaults(func=cmd_analyze_traces)

    p = sub.add_parser("stats", help="paired endpoint statistics between two metric tables")
    p.add_argument("--a", required=True, help="metrics CSV, variant a")
    p.add_argument("--b", required=True, help="metrics CSV, variant b")
    p.add_argument("--families", help="JSON family -> endpoint list (default: built-in)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-boot", type=int, default=stats.DEFAULT_BOOT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="run the plan review HTTP service")
    p.add_argument("--store", required=True, help="session store directory")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static", help="directory of review UI assets to serve at /")
    p.add_argument("--allow-multiple-refinements", action="store_true")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:
        logger.error("%s", exc, exc_info=args.verbose)
        return 1


if __name__ == "__main__":
    sys.exit(main())
