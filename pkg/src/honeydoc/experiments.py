"""The four canned experiments and their trace-derived reports."""

from __future__ import annotations

import dataclasses
import io
import random
import statistics
from dataclasses import dataclass, field

from honeydoc.core import Flag, IpAddr, Kind, MacAddr, Segment
from honeydoc.dataplane import Disposition, normalize_dump
from honeydoc.decoys import BUILTIN_SCRIPTS, DecoyClass, DecoyConfig
from honeydoc.orchestrator import Mechanism
from honeydoc.rules import Action, ClassificationRule
from honeydoc.scenario import (
    FCF_NAME,
    Scenario,
    TopologyParams,
    build,
    load_scenario,
    run,
)
from honeydoc.simnet import MS, AttackerModel, ConnectionPlan, packets_per_bin
from honeydoc.validate import check_trace, first_failure, flow_graph, validate_handover

# attack ports that produced hits, with their hit counts
PORT_HITS = {21: 115, 42: 28, 135: 12, 445: 2, 1433: 2, 5060: 7, 40950: 1, 42737: 1, 53360: 1}
SMTP_SESSION = (b"HELO test\n", b"MAIL FROM: <test@test.test>\n", b"RCPT TO: <root@localhost>\n",
                b"DATA.\n", b"test.\n")
MECHANISMS = (Mechanism.DIRECT, Mechanism.M1, Mechanism.M2)


# ---------------------------------------------------------------------------
# trace-derived measurements

def decoy_nodes(trace):
    """Nodes that wrote activity logs or answered as a TCP endpoint."""
    names = set()
    for ev in trace:
        if ev.kind is Kind.DECOY_LOG:
            names.add(ev.location)
        elif ev.kind is Kind.TERMINATED and "remote" in ev.detail:
            names.add(ev.location)
        elif ev.kind is Kind.FRAME:
            sender = ev.endpoints()[0]
            seg = ev.segment
            if seg.flags & Flag.SYN and seg.flags & Flag.ACK and sender != FCF_NAME \
                    and not sender.startswith("spf-"):
                names.add(sender)
    return names


def first_psh_latencies(trace, decoys=None):
    """Per connection: first SYN on the attacker's link to the first
    payload-bearing segment delivered at a decoy, in microseconds.

    Returns ``[(conn_label, latency_us or None)]`` in SYN order.
    """
    decoys = decoy_nodes(trace) if decoys is None else set(decoys)
    opened = {}
    order = []
    for ev in trace:
        if ev.kind is not Kind.FRAME:
            continue
        seg = ev.segment
        sender, receiver = ev.endpoints()
        ft = seg.five_tuple
        if receiver == FCF_NAME and sender not in decoys and not sender.startswith("spf-") \
                and seg.flags & Flag.SYN and not seg.flags & Flag.ACK and ft not in opened:
            opened[ft] = [ev.time, None]
            order.append(ft)
        elif receiver in decoys and seg.payload and ft in opened and opened[ft][1] is None:
            opened[ft][1] = ev.time
    out = []
    for ft in order:
        start, end = opened[ft]
        label = f"{ft.src_ip}:{ft.src_port}>{ft.dst_ip}:{ft.dst_port}"
        out.append((label, None if end is None else end - start))
    return out


def decoy_deliveries(trace, decoys=None):
    """Distinct connection attempts (SYNs) that reached a decoy, per port."""
    decoys = decoy_nodes(trace) if decoys is None else set(decoys)
    seen = set()
    counts = {}
    for ev in trace:
        if ev.kind is not Kind.FRAME or ev.endpoints()[1] not in decoys:
            continue
        seg = ev.segment
        if seg.flags & Flag.SYN and not seg.flags & Flag.ACK and seg.five_tuple not in seen:
            seen.add(seg.five_tuple)
            counts[seg.dst_port] = counts.get(seg.dst_port, 0) + 1
    return dict(sorted(counts.items()))


def percentile(values, q):
    """Nearest-rank percentile."""
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, -(-len(ordered) * q // 100))
    return ordered[int(rank) - 1]


# ---------------------------------------------------------------------------
# closed-form path delays

@dataclass(frozen=True)
class PathDelays:
    """One-way delays in microseconds along the data and control paths."""

    attacker_fcf: int
    fcf_spf: int
    spf_decoy: int
    fcf_frontend: int
    channel: int
    processing: int
    decision: int = 0

    @classmethod
    def uniform(cls, t: TopologyParams):
        link = t.link_latency_us
        return cls(link, link, link, link, t.controller_channel_latency_us,
                   t.controller_processing_us, t.decision_delay_us)


def expected_first_psh_us(mechanism, d: PathDelays) -> int:
    """First-push latency for an idle network, by summing the path.

    Measured from the SYN reaching the FCF to the first payload reaching
    the backend, which sits behind an SPF.
    """
    mechanism = Mechanism(mechanism)
    backend = d.fcf_spf + d.spf_decoy
    if mechanism is Mechanism.DIRECT:
        # SYN in, SYN/ACK out, payload in
        return 2 * d.attacker_fcf + 3 * backend
    # SYN/ACK from the controller, then the first payload climbs to it
    front = 2 * d.attacker_fcf + 2 * d.channel + d.processing
    if mechanism is Mechanism.M2:
        # the SYN and SYN/ACK also cross the frontend link and the controller twice
        front += 2 * d.fcf_frontend + 2 * d.channel + d.processing
    classify = d.channel + d.processing + d.decision
    # replayed SYN and its SYN/ACK through the SPF, then the stored payload
    replay = (d.channel + 2 * d.spf_decoy) + (d.channel + d.processing) + (d.channel + backend)
    return front + classify + replay


def controller_path_overhead_us(d: PathDelays) -> int:
    return expected_first_psh_us(Mechanism.M1, d) - expected_first_psh_us(Mechanism.DIRECT, d)


# ---------------------------------------------------------------------------
# sensibility

@dataclass
class SensibilityReport:
    dump: str
    probes: dict  # port -> "controller" | "denied" | "forwarded"

    def text(self):
        lines = [self.dump.rstrip("\n")]
        for port, verdict in self.probes.items():
            lines.append(f"probe tcp/{port}: {verdict}")
        return "\n".join(lines) + "\n"


_VERDICT = {Disposition.CONTROLLER: "controller", Disposition.DROPPED: "denied",
            Disposition.EMIT: "forwarded"}


def exp_sensibility(scenario: Scenario, ports=(21, 25, 22)) -> SensibilityReport:
    """Initial FCF table plus the fate of one SYN probe per port."""
    sc = dataclasses.replace(scenario, attackers=[])
    r = build(sc, horizon_ms=1)
    r.sim.run()
    fcf = r.fcf
    dump = normalize_dump(fcf.dump(r.sim.now))
    target = sc.decoys[0]
    probes = {}
    for i, port in enumerate(ports):
        probe = Segment(MacAddr.parse("02:00:00:00:00:01"), target.mac, IpAddr.parse("10.1.0.2"),
                        target.ip, 6, 50000 + i, port, Flag.SYN, 1000, 0)
        probes[port] = _VERDICT[fcf.process(probe, 1, r.sim.now).disposition]
    return SensibilityReport(dump, probes)


# ---------------------------------------------------------------------------
# handover

@dataclass
class HandoverReport:
    trace: object
    checks: list
    attacker_graph: list
    backend_graph: list

    @property
    def ok(self):
        return first_failure(self.checks) is None

    def verdict(self):
        bad = first_failure(self.checks)
        return "handover OK" if bad is None else f"handover FAILED: {bad.line()}"


def exp_handover(scenario: Scenario, mechanism=None, seed=None) -> HandoverReport:
    sc = scenario if mechanism is None else scenario.with_mechanism(mechanism)
    trace = run(sc, seed=seed).trace
    checks = validate_handover(trace) + check_trace(trace)
    attacker = sc.attackers[0].name
    conn = None
    for ev in trace:
        if ev.kind is Kind.FRAME and ev.endpoints()[0] == attacker:
            conn = ev.segment.five_tuple
            break
    syncs = [ev for ev in trace if ev.kind is Kind.DECISION and ev.detail.get("event") == "sync"]
    backend = syncs[0].detail["target"] if syncs else sc.direct_target
    spf = f"spf-{backend}"
    upstream = spf if any(n == spf for n in (ev.endpoints()[0] for ev in trace
                                             if ev.kind is Kind.FRAME)) else FCF_NAME
    return HandoverReport(trace, checks, flow_graph(trace, attacker, FCF_NAME, conn),
                          flow_graph(trace, upstream, backend, conn))


# ---------------------------------------------------------------------------
# latency

@dataclass
class LatencyReport:
    rows: list = field(default_factory=list)  # (mechanism, conn_id, latency_us)
    histograms: dict = field(default_factory=dict)  # mechanism -> {bin start ms: frames}
    expected_us: dict = field(default_factory=dict)  # mechanism -> closed form
    overhead_us: int = 0

    def latencies(self, mechanism):
        m = Mechanism(mechanism).value
        return [lat for mech, _, lat in self.rows if mech == m and lat is not None]

    def mean_ms(self, mechanism):
        return statistics.fmean(self.latencies(mechanism)) / MS

    def summary(self):
        out = {}
        for mech in dict.fromkeys(m for m, _, _ in self.rows):
            lats = self.latencies(mech)
            if not lats:
                continue
            out[mech] = {"n": len(lats), "mean_ms": statistics.fmean(lats) / MS,
                         "p50_ms": percentile(lats, 50) / MS,
                         "p95_ms": percentile(lats, 95) / MS}
        return out

    def to_csv(self):
        buf = io.StringIO()
        buf.write("mechanism,conn_id,latency_ms\n")
        for mech, conn_id, lat in self.rows:
            buf.write(f"{mech},{conn_id},{'' if lat is None else f'{lat / MS:.3f}'}\n")
        return buf.getvalue()

    def histogram_csv(self):
        buf = io.StringIO()
        buf.write("mechanism,bin_ms,packets\n")
        for mech, hist in self.histograms.items():
            for start, count in hist.items():
                buf.write(f"{mech},{start},{count}\n")
        return buf.getvalue()


def exp_latency(scenario: Scenario, n_connections=100, rate_per_s=10.0, seed=None,
                mechanisms=MECHANISMS, bin_ms=100) -> LatencyReport:
    """Run the SMTP client against each mechanism and time the first push."""
    if n_connections < 1:
        raise ValueError("n_connections must be >= 1")
    base = scenario.attackers[0]
    client = dataclasses.replace(base, script=base.script or SMTP_SESSION,
                                 connections=n_connections, connection_rate_per_s=rate_per_s,
                                 plans=())
    report = LatencyReport()
    delays = PathDelays.uniform(scenario.topology)
    report.overhead_us = controller_path_overhead_us(delays)
    for mech in mechanisms:
        mech = Mechanism(mech)
        sc = scenario.with_mechanism(mech, attackers=[client], horizon_ms=None)
        trace = run(sc, seed=seed).trace
        for conn_id, (_, lat) in enumerate(first_psh_latencies(trace)):
            report.rows.append((mech.value, conn_id, lat))
        backend = sc.direct_target
        report.histograms[mech.value] = {
            start * bin_ms: n
            for start, n in packets_per_bin(trace, backend, bin_ms).items()}
        report.expected_us[mech.value] = expected_first_psh_us(mech, delays)
    return report


# ---------------------------------------------------------------------------
# data reduction

def generate_attack_ports(n, seed=0, off_fraction=0.9, weights=None):
    """Destination ports for ``n`` synthetic connection attempts.

    ``off_fraction`` of them go to uniformly drawn ports outside the
    weighted table; the rest follow the table's weights.
    """
    if not 0 <= off_fraction <= 1:
        raise ValueError("off_fraction must be within [0, 1]")
    weights = PORT_HITS if weights is None else weights
    rng = random.Random(f"{seed}/attack-trace")
    listed = list(weights)
    w = [weights[p] for p in listed]
    ports = []
    for _ in range(n):
        if rng.random() < off_fraction:
            while True:
                port = rng.randint(1, 65535)
                if port not in weights:
                    break
        else:
            port = rng.choices(listed, w)[0]
        ports.append(port)
    return ports


def allowlist_rules(ports):
    rules = [ClassificationRule("tcp", None, None, None, p, Action.MIH, sid=1000 + i, priority=1)
             for i, p in enumerate(sorted(ports))]
    rules.append(ClassificationRule("tcp", None, None, None, None, Action.DROP,
                                    sid=999999, priority=0))
    return rules


def accept_all_rules():
    return [ClassificationRule("tcp", None, None, None, None, Action.MIH, sid=1, priority=0)]


def reduction_scenario(ports, rules, seed=0, rate_per_s=200.0) -> Scenario:
    """One low-interaction catch-all decoy fed by a stream of attack attempts."""
    dionaea = DecoyConfig("dionaea", DecoyClass.MIH, IpAddr.parse("10.1.1.2"),
                          MacAddr.parse("52:54:00:0a:01:02"), 2,
                          open_ports=frozenset(PORT_HITS),
                          service_scripts={21: BUILTIN_SCRIPTS["ftp-amun"]})
    rng = random.Random(f"{seed}/attack-sources")
    gap = 1_000_000 / rate_per_s
    plans = tuple(
        ConnectionPlan(round(i * gap), IpAddr.parse(f"10.2.{rng.randint(0, 255)}."
                                                    f"{rng.randint(1, 254)}"),
                       1024 + i % 64000, dionaea.ip, port, (b"USER anonymous\r\n",))
        for i, port in enumerate(ports))
    attacker = AttackerModel("internet", IpAddr.parse("10.1.0.1"),
                             MacAddr.parse("52:54:00:0a:00:01"), max_retries=0, plans=plans)
    topo = TopologyParams(flow_idle_timeout_us=1000 * MS)
    return Scenario("reduce", Mechanism.M2, seed, rules, [dionaea], [attacker], topo,
                    frontend="dionaea")


@dataclass
class ReductionReport:
    n_connections: int
    before: dict  # port -> deliveries without filtering
    after: dict  # port -> deliveries with the allowlist
    allowlist: frozenset

    def off_list(self, counts):
        return sum(n for p, n in counts.items() if p not in self.allowlist)

    def to_csv(self):
        buf = io.StringIO()
        buf.write("port,listed,before,after\n")
        for port in sorted(set(self.before) | set(self.after)):
            buf.write(f"{port},{int(port in self.allowlist)},{self.before.get(port, 0)},"
                      f"{self.after.get(port, 0)}\n")
        return buf.getvalue()


def exp_data_reduction(ports, allowlist=None, seed=0) -> ReductionReport:
    """Replay the attack attempts without and with the allowlist ruleset."""
    allowlist = frozenset(PORT_HITS if allowlist is None else allowlist)
    ports = list(ports)
    results = []
    for rules in (accept_all_rules(), allowlist_rules(allowlist)):
        if not ports:
            results.append({})
            continue
        sc = reduction_scenario(ports, rules, seed)
        trace = run(sc).trace
        results.append(decoy_deliveries(trace, {"dionaea"}))
    return ReductionReport(len(ports), results[0], results[1], allowlist)


def histogram_pvalue(counts: dict, weights=None) -> float:
    """Chi-square goodness of fit of listed-port counts against the weights."""
    from scipy.stats import chisquare

    weights = PORT_HITS if weights is None else weights
    observed = [counts.get(p, 0) for p in weights]
    total = sum(observed)
    w_total = sum(weights.values())
    expected = [total * weights[p] / w_total for p in weights]
    return float(chisquare(observed, expected).pvalue)


__all__ = [
    "PathDelays",
    "PORT_HITS",
    "controller_path_overhead_us",
    "decoy_deliveries",
    "exp_data_reduction",
    "exp_handover",
    "exp_latency",
    "exp_sensibility",
    "expected_first_psh_us",
    "first_psh_latencies",
    "generate_attack_ports",
    "histogram_pvalue",
    "load_scenario",
]
