"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from honeydoc.core import Trace
from honeydoc.dataplane import normalize_dump
from honeydoc.experiments import (
    PORT_HITS,
    exp_data_reduction,
    exp_handover,
    exp_latency,
    exp_sensibility,
    generate_attack_ports,
    histogram_pvalue,
)
from honeydoc.orchestrator import ConfigError
from honeydoc.rules import RuleSyntaxError
from honeydoc.scenario import SCENARIO_DIR, ScenarioError, build, load_scenario
from honeydoc.validate import check_trace, first_failure, validate_handover

EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load(args, default=None):
    path = getattr(args, "scenario", None) or default
    return load_scenario(path, seed=getattr(args, "seed", None))


def cmd_run(args):
    sc = _load(args)
    if args.mech:
        sc = sc.with_mechanism(args.mech)
    r = build(sc, horizon_ms=args.horizon_ms)
    r.sim.run()
    _write(args.out, r.trace.to_text())
    bad = first_failure(check_trace(r.trace))
    if bad is not None:
        print(bad.line(), file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_dump_flows(args):
    sc = _load(args)
    r = build(sc, horizon_ms=args.at_ms)
    r.sim.run()
    names = [args.switch] if args.switch else list(r.switches)
    out = []
    for name in names:
        if name not in r.switches:
            raise ConfigError(f"no switch named {name!r}")
        dump = r.switches[name].dump(r.sim.now)
        if args.normalize:
            dump = normalize_dump(dump)
        if len(names) > 1:
            out.append(f"# {name}\n")
        out.append(dump)
    _write(args.out, "".join(out))
    return EXIT_OK


def cmd_validate(args):
    try:
        trace = Trace.read(args.trace)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    checks = check_trace(trace)
    if args.handover:
        checks = validate_handover(trace, args.first_len) + checks
    for c in checks:
        print(c.line())
    return EXIT_OK if first_failure(checks) is None else EXIT_INVALID


def exp_cmd_sensibility(args):
    report = exp_sensibility(_load(args, SCENARIO_DIR / "sensibility.scn"))
    _write(args.out, report.text())
    return EXIT_OK


def exp_cmd_handover(args):
    sc = _load(args, SCENARIO_DIR / "ssh-handover.scn")
    report = exp_handover(sc, args.mech)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"handover-{(args.mech or sc.mechanism.value)}"
    report.trace.write(out / f"{stem}.trace")
    graphs = ["# attacker link"] + report.attacker_graph + ["", "# backend link"] \
        + report.backend_graph
    (out / f"{stem}.flow").write_text("\n".join(graphs) + "\n", encoding="utf-8")
    for c in report.checks:
        print(c.line())
    print(report.verdict())
    return EXIT_OK if report.ok else EXIT_INVALID


def exp_cmd_latency(args):
    sc = _load(args, SCENARIO_DIR / "smtp.scn")
    report = exp_latency(sc, args.n, args.rate)
    _write(args.csv, report.to_csv())
    if args.hist:
        _write(args.hist, report.histogram_csv())
    summary = report.summary()
    for mech, stats in summary.items():
        print(f"{mech}: n={stats['n']} mean={stats['mean_ms']:.3f}ms "
              f"p50={stats['p50_ms']:.3f}ms p95={stats['p95_ms']:.3f}ms "
              f"expected={report.expected_us[mech] / 1000:.3f}ms", file=sys.stderr)
    means = [summary[m]["mean_ms"] for m in ("direct", "m1", "m2") if m in summary]
    ordered = all(a <= b for a, b in zip(means, means[1:]))
    return EXIT_OK if ordered else EXIT_INVALID


def exp_cmd_reduce(args):
    ports = generate_attack_ports(args.n, args.seed or 0, args.off_fraction)
    report = exp_data_reduction(ports, seed=args.seed or 0)
    _write(args.csv, report.to_csv())
    print(f"connections={report.n_connections} "
          f"delivered_before={sum(report.before.values())} "
          f"delivered_after={sum(report.after.values())} "
          f"off_list_after={report.off_list(report.after)}", file=sys.stderr)
    if any(report.before.get(p) for p in PORT_HITS):
        print(f"listed-port histogram p={histogram_pvalue(report.before):.4f}", file=sys.stderr)
    return EXIT_OK if report.off_list(report.after) == 0 else EXIT_INVALID


def build_parser():
    p = argparse.ArgumentParser(prog="honeydoc",
                                description="Hybrid decoy orchestration simulator.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    run = sub.add_parser("run", help="run a scenario and write its trace")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--mech", choices=["direct", "m1", "m2"])
    run.add_argument("--horizon-ms", type=int)
    run.add_argument("-o", "--out", help="trace file (default: stdout)")
    run.set_defaults(func=cmd_run)

    dump = sub.add_parser("dump-flows", help="print switch flow tables")
    dump.add_argument("scenario")
    dump.add_argument("--seed", type=int)
    dump.add_argument("--switch", help="one switch only (default: all)")
    dump.add_argument("--at-ms", type=int, default=1,
                      help="simulated time to stop at before dumping (default: 1)")
    dump.add_argument("--normalize", action="store_true", help="zero the durations")
    dump.add_argument("-o", "--out")
    dump.set_defaults(func=cmd_dump_flows)

    val = sub.add_parser("validate", help="check a trace file")
    val.add_argument("trace")
    val.add_argument("--handover", action="store_true",
                     help="also check the connection-handover pattern")
    val.add_argument("--first-len", type=int, default=43,
                     help="expected length of the first payload (default: 43)")
    val.set_defaults(func=cmd_validate)

    exp = sub.add_parser("exp", help="canned experiments")
    esub = exp.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")

    sens = esub.add_parser("sensibility", help="rule translation dump and probes")
    sens.add_argument("--scenario")
    sens.add_argument("-o", "--out")
    sens.set_defaults(func=exp_cmd_sensibility)

    hand = esub.add_parser("handover", help="SSH connection handover trace")
    hand.add_argument("--scenario")
    hand.add_argument("--mech", choices=["m1", "m2"])
    hand.add_argument("--seed", type=int)
    hand.add_argument("--out-dir", default=".")
    hand.set_defaults(func=exp_cmd_handover)

    lat = esub.add_parser("latency", help="first-push latency per mechanism")
    lat.add_argument("--scenario")
    lat.add_argument("--seed", type=int)
    lat.add_argument("-n", "--n", type=int, default=100)
    lat.add_argument("--rate", type=float, default=10.0, help="connections per second")
    lat.add_argument("--csv", help="latency CSV (default: stdout)")
    lat.add_argument("--hist", help="packet histogram CSV")
    lat.set_defaults(func=exp_cmd_latency)

    red = esub.add_parser("reduce", help="data reduction with an allowlist")
    red.add_argument("--seed", type=int)
    red.add_argument("-n", "--n", type=int, default=10000)
    red.add_argument("--off-fraction", type=float, default=0.9)
    red.add_argument("--csv", help="per-port CSV (default: stdout)")
    red.set_defaults(func=exp_cmd_reduce)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ConfigError, RuleSyntaxError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
