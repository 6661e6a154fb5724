"""Command-line entry point: ``factor-route {validate,simulate,replay,explain,model}``.

Exit codes: 0 success, 1 validation or conformance failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import yaml

from factor_route.config import (
    ConfigError,
    ConfigParseError,
    FactorList,
    FactorListInvalid,
    parse_factor_list,
)
from factor_route.router import DecisionTrace
from factor_route.simulator.analytical import (
    TABLE2_FOOTNOTE,
    TABLE2_PARAMS,
    availability_parallel,
    availability_serial,
    expected_failures,
    table2_rows,
)
from factor_route.simulator.conformance import check_state_machine
from factor_route.simulator.engine import SimReport, run_scenario
from factor_route.simulator.replay import ReplayError, load_traces, replay
from factor_route.simulator.scenario import (
    ScenarioError,
    SimMode,
    bundled_scenario_path,
    bundled_scenarios,
    load_scenario,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

SEED_ENV = "FACTOR_ROUTE_SEED"


class UsageError(Exception):
    """Bad input the user can fix; maps to exit code 2."""


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _fmt_num(x: float) -> str:
    return f"{x:.6f}".rstrip("0").rstrip(".") if x != int(x) else str(int(x))


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------


def lint_factor_list(fl: FactorList) -> list[str]:
    """Non-fatal findings; ``--strict`` turns them into failures."""
    out = []
    for p in fl.providers:
        if not p.enabled:
            out.append(f"providers.{p.id}: disabled provider can never be selected")
        if not p.supported_regions:
            out.append(f"providers.{p.id}: no supported_regions declared; region gate passes it everywhere")
    for s in fl.scores:
        if s.weight == 0:
            out.append(f"scores.{s.name.value}: zero weight has no effect")
    if not fl.gates:
        out.append("gates: no hard constraints configured")
    return out


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    violations: list[str] = []
    fl = None
    try:
        fl = parse_factor_list(text, validate=True)
    except FactorListInvalid as exc:
        violations = list(exc.violations)
    except ConfigParseError as exc:
        violations = [str(exc)]
    warnings = lint_factor_list(fl) if fl is not None else []
    ok = not violations and not (args.strict and warnings)
    if args.format == "json":
        sys.stdout.write(
            _dump_json(
                {
                    "ok": ok,
                    "version": fl.version if fl is not None else None,
                    "violations": violations,
                    "warnings": warnings,
                }
            )
        )
    else:
        for v in violations:
            print(f"violation: {v}")
        for w in warnings:
            print(f"{'violation' if args.strict else 'warning'}: {w}")
        if ok:
            assert fl is not None
            print(f"OK, version {fl.version}")
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def resolve_scenario_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    if name in bundled_scenarios():
        return bundled_scenario_path(name)
    raise UsageError(f"scenario {name!r} is neither a file nor a bundled scenario ({', '.join(bundled_scenarios())})")


def resolve_seed(flag: int | None, default: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return default


def analytical_line(row: dict[str, Any]) -> str:
    expected = int(round(row["expected_failures"]))
    published = row.get("published")
    line = f"expected_failures={expected}"
    if published is not None:
        if published != expected:
            line += f" (published table: {published}, see notes)"
        else:
            line += f" (published table: {published})"
    line += f" simulated={_fmt_num(round(row['simulated_failures'], 3))}"
    return line


def simulate_summary(report: SimReport, conformance: dict[str, Any] | None) -> str:
    d = report.to_dict()
    lines = [
        f"scenario: {report.name}  mode: {report.mode.value}  seed: {report.seed}",
        f"requests={report.requests} completion_rate={d['completion_rate']} "
        f"failed={_fmt_num(round(report.failed_request_count, 3))} shed={report.shed_count}",
        f"failover_delay_ms={report.observed_failover_delay_ms} bound_ms={report.failover_bound_ms} "
        f"bound_ok={report.bound_ok}",
        f"switch_count={len(report.switch_timeline)} flap_count={report.flap_count} "
        f"cost_per_success={d['cost_per_success']}",
        f"trace_completeness={d['trace_completeness']}",
    ]
    if report.analytical is not None:
        lines.append(analytical_line(report.analytical))
        if report.analytical.get("note"):
            lines.append(f"note: {TABLE2_FOOTNOTE}")
    if conformance is not None:
        for scope, res in sorted(conformance.items()):
            status = "conformant" if res["ok"] else "NONCONFORMING"
            labels = " ".join(res["labels"]) or "-"
            lines.append(f"state machine [{scope}]: {labels} ({status})")
            for v in res["violations"]:
                lines.append(f"  at {v['ts']} ms {v['from']} -> {v['to']}: {v['evidence']}")
    for n in report.notes:
        lines.append(f"note: {n}")
    return "\n".join(lines) + "\n"


def _write_outputs(out: Path, report: SimReport, conformance: dict[str, Any] | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    if conformance is not None:
        doc["state_machine"] = conformance
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    (out / "series.csv").write_text(report.series_csv(), encoding="utf-8")
    (out / "switches.jsonl").write_text(
        "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in report.switch_timeline), encoding="utf-8"
    )
    (out / "traces.jsonl").write_text(report.traces_jsonl(), encoding="utf-8")
    if report.log is not None:
        report.log.dump(out / "events.jsonl")
        report.log.dump_links(out / "links.jsonl")


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        path = resolve_scenario_path(args.scenario)
        scenario = load_scenario(path, args.variant)
        seed = resolve_seed(args.seed, scenario.seed)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, OSError) as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    mode = SimMode(args.mode) if args.mode else scenario.mode
    report = run_scenario(scenario, mode, seed)
    conformance = None
    if len(scenario.providers) == 2:
        conformance = {k: v.to_dict() for k, v in check_state_machine(report, scenario).items()}
    conformant = conformance is None or all(r["ok"] for r in conformance.values())
    if args.out:
        _write_outputs(Path(args.out), report, conformance)
    if args.format == "json":
        doc = report.to_dict()
        if conformance is not None:
            doc["state_machine"] = conformance
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    elif args.format == "csv":
        sys.stdout.write(report.series_csv())
    else:
        sys.stdout.write(simulate_summary(report, conformance))
    return EXIT_OK if conformant and report.bound_ok else EXIT_FAIL


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------


def load_candidate(path: str, variant: str | None = None) -> FactorList:
    """A factor-list file, or a scenario file whose inline factor list is used."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    doc = yaml.safe_load(text)
    if isinstance(doc, dict) and "factor_list" in doc:
        return load_scenario(path, variant).factor_list
    return parse_factor_list(text)


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        candidate = load_candidate(args.config, args.variant)
        result = replay(args.log, candidate, links_path=args.links, traces_path=args.traces)
    except (UsageError, ReplayError, ConfigError, ScenarioError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        Path(args.out).write_text(result.to_json(), encoding="utf-8")
    if args.format == "json":
        doc = result.to_dict()
        doc.pop("report")
        sys.stdout.write(_dump_json(doc))
    elif args.format == "csv":
        sys.stdout.write(_csv([d.to_dict() for d in result.diffs], ["trace_id", "timestamp", "recorded", "replayed"]))
    else:
        print(result.summary())
        for s in result.switches_added[:10]:
            print(f"  + switch at {s.ts} ms [{s.scope}] {s.from_provider} -> {s.to_provider}")
        for s in result.switches_removed[:10]:
            print(f"  - switch at {s.ts} ms [{s.scope}] {s.from_provider} -> {s.to_provider}")
        for w in result.warnings:
            print(f"warning: {w}")
    return EXIT_OK


# --------------------------------------------------------------------------
# explain
# --------------------------------------------------------------------------


def explain_trace(t: DecisionTrace) -> str:
    """Human-readable narrative of one routing decision."""
    lines = [f"decision {t.trace_id} (request {t.request_id}, attempt {t.attempt}) at {t.timestamp} ms"]
    lines.append(f"  operation {t.operation}, config version {t.factor_list_version or '-'}")
    if t.applied_overrides:
        lines.append(f"  overrides applied: {', '.join(str(i) for i in t.applied_overrides)}")
    if t.snapshot_ts is None:
        lines.append(f"  telemetry: no snapshot{' (stale)' if t.snapshot_stale else ''}")
    else:
        age = t.timestamp - t.snapshot_ts
        lines.append(
            f"  telemetry: snapshot {t.snapshot_id or '-'} age {age} ms{' (stale)' if t.snapshot_stale else ''}"
        )
    providers = list(dict.fromkeys(g.provider for g in t.gate_results))
    scored = {c.provider: c for c in t.candidates}
    for p in providers:
        gates = [g for g in t.gate_results if g.provider == p]
        passed = all(g.passed for g in gates)
        lines.append(f"  provider {p}: {'eligible' if passed else 'gated out'}")
        for g in gates:
            lines.append(f"    gate {g.gate}: {'pass' if g.passed else 'FAIL'} ({g.reason})")
        c = scored.get(p)
        if c is not None:
            for f in c.per_factor:
                raw = "absent" if f.raw is None else _fmt_num(round(f.raw, 6))
                src = " default" if f.used_default else ""
                lines.append(
                    f"    factor {f.factor}: raw {raw} -> normalized {f.normalized:.4f}{src} "
                    f"x weight {_fmt_num(f.weight)} = {f.weighted:.4f}"
                )
            lines.append(f"    score {c.total:.4f}{' (probe)' if c.probe else ''}")
    lines.append(f"  incumbent before decision: {t.previous_choice or '-'}")
    lines.append(f"  hysteresis applied: {'yes' if t.hysteresis_applied else 'no'}")
    lines.append(f"  tie-break: {t.tie_break_applied or 'none'}")
    if t.stale_policy_applied:
        lines.append(f"  stale telemetry policy: {t.stale_policy_applied}")
    if t.selected is not None:
        lines.append(f"  selected {t.selected}{' as a probe' if t.probe else ''}")
    else:
        kind = t.fallback.value if t.fallback is not None else "none"
        failing = sorted({f"{g.provider}: {g.gate} ({g.reason})" for g in t.gate_results if not g.passed})
        lines.append(f"  no eligible providers; fallback {kind} ({t.fallback_reason or 'unspecified'})")
        for f in failing:
            lines.append(f"    {f}")
    return "\n".join(lines) + "\n"


def cmd_explain(args: argparse.Namespace) -> int:
    try:
        traces = load_traces(args.traces)
    except OSError as exc:
        print(f"error: cannot read {args.traces}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"error: malformed trace file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    matches = [t for t in traces if t.request_id == args.request_id or t.trace_id == args.request_id]
    if not matches:
        print(f"error: request_not_found: {args.request_id}", file=sys.stderr)
        return EXIT_FAIL
    if args.format == "json":
        sys.stdout.write(_dump_json([t.to_dict() for t in matches]))
    else:
        sys.stdout.write("".join(explain_trace(t) for t in matches))
    return EXIT_OK


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def _prob(value: str) -> float:
    x = float(value)
    if not 0.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not a probability in [0, 1]")
    return x


def _nonneg(value: str) -> float:
    x = float(value)
    if x < 0:
        raise argparse.ArgumentTypeError(f"{value} must be non-negative")
    return x


def cmd_model(args: argparse.Namespace) -> int:
    doc: dict[str, Any] = {}
    text: list[str] = []
    rows: list[dict[str, Any]] = []
    explicit = any(v is not None for v in (args.lam, args.duration, args.switch, args.pf, args.ps))
    if not (args.table2 or args.avail or explicit):
        print("error: give --table2, --avail, or expected-failure parameters", file=sys.stderr)
        return EXIT_USAGE
    if args.table2:
        table = [
            {
                "strategy": r.strategy,
                "switch_min": r.switch_min,
                "expected_failures": r.rounded,
                "published": r.published,
            }
            for r in table2_rows()
        ]
        doc["table2"] = {"params": TABLE2_PARAMS, "rows": table, "footnote": TABLE2_FOOTNOTE}
        rows.extend(table)
        text.append(f"{'strategy':<28}{'switch_min':>11}{'expected_failures':>19}")
        for r in table:
            mark = "*" if r["expected_failures"] != r["published"] else ""
            text.append(f"{r['strategy']:<28}{_fmt_num(r['switch_min']):>11}{r['expected_failures']:>18}{mark}")
        text.append(f"* {TABLE2_FOOTNOTE}")
    if explicit:
        lam = args.lam if args.lam is not None else TABLE2_PARAMS["lambda_per_min"]
        dur = args.duration if args.duration is not None else TABLE2_PARAMS["d_min"]
        sw = args.switch if args.switch is not None else 0.0
        pf = args.pf if args.pf is not None else TABLE2_PARAMS["p_f"]
        ps = args.ps if args.ps is not None else TABLE2_PARAMS["p_s"]
        e = expected_failures(lam, dur, sw, pf, ps)
        doc["expected_failures"] = {
            "lambda_per_min": lam,
            "duration_min": dur,
            "switch_min": sw,
            "p_f": pf,
            "p_s": ps,
            "value": round(e, 9),
        }
        rows.append({"strategy": "custom", "switch_min": sw, "expected_failures": round(e, 9), "published": ""})
        text.append(f"expected_failures={_fmt_num(round(e, 9))} (lambda={_fmt_num(lam)}/min D={_fmt_num(dur)} min "
                    f"T={_fmt_num(sw)} min p_f={_fmt_num(pf)} p_s={_fmt_num(ps)})")
    if args.avail:
        serial = availability_serial(args.avail)
        doc["availability"] = {"inputs": args.avail, "serial": round(serial, 12)}
        text.append(f"serial availability of {len(args.avail)}: {serial:.6f}")
        if len(args.avail) == 2:
            par = availability_parallel(*args.avail)
            doc["availability"]["parallel"] = round(par, 12)
            text.append(f"parallel availability of 2: {par:.6f}")
    if args.format == "json":
        sys.stdout.write(_dump_json(doc))
    elif args.format == "csv":
        out = _csv(rows, ["strategy", "switch_min", "expected_failures", "published"]) if rows else ""
        if args.avail:
            avail_rows = [{"kind": "serial", "value": doc["availability"]["serial"]}]
            if "parallel" in doc["availability"]:
                avail_rows.append({"kind": "parallel", "value": doc["availability"]["parallel"]})
            out += _csv(avail_rows, ["kind", "value"])
        sys.stdout.write(out)
    else:
        sys.stdout.write("\n".join(text) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factor-route", description="Score-based multi-provider routing: policy checks, simulation and replay.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="parse and validate a factor-list file")
    v.add_argument("config")
    v.add_argument("--strict", action="store_true", help="treat lint warnings as violations")
    v.add_argument("--format", choices=("text", "json"), default="text")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="run a scenario and check the preference state machine")
    s.add_argument("scenario", help="scenario file or bundled scenario name")
    s.add_argument("--variant")
    s.add_argument("--mode", choices=[m.value for m in SimMode])
    s.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the scenario seed")
    s.add_argument("--out", help="directory for report.json, series.csv, traces and event logs")
    s.add_argument("--format", choices=("text", "json", "csv"), default="text")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="replay an event log against a candidate factor list")
    r.add_argument("log")
    r.add_argument("config", help="factor-list file, or scenario file whose factor list is used")
    r.add_argument("--variant", help="scenario variant when config is a scenario file")
    r.add_argument("--links", help="completion-link JSONL recorded with the log")
    r.add_argument("--traces", help="decision-trace JSONL recorded with the log")
    r.add_argument("--out", help="write the full counterfactual report as JSON")
    r.add_argument("--format", choices=("text", "json", "csv"), default="text")
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("explain", help="narrate the routing decisions for one request")
    e.add_argument("traces")
    e.add_argument("request_id")
    e.add_argument("--format", choices=("text", "json"), default="text")
    e.set_defaults(func=cmd_explain)

    m = sub.add_parser("model", help="closed-form failover and availability figures")
    m.add_argument("--table2", action="store_true", help="print the five-row failover-delay sensitivity table")
    m.add_argument("--avail", type=_prob, nargs="+", metavar="A", help="component availabilities")
    m.add_argument("--lambda", dest="lam", type=_nonneg, help="requests per minute")
    m.add_argument("--duration", type=_nonneg, help="outage duration in minutes")
    m.add_argument("--switch", type=_nonneg, help="time to switch providers in minutes")
    m.add_argument("--pf", type=_prob, help="success probability on the failing provider")
    m.add_argument("--ps", type=_prob, help="success probability on the secondary")
    m.add_argument("--format", choices=("text", "json", "csv"), default="text")
    m.set_defaults(func=cmd_model)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
