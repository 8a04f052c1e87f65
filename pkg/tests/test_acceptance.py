"""One test per acceptance criterion. Each prints a single PASS/FAIL line."""

import os
import random
import subprocess
import sys
import time

from conftest import ACCEPTANCE_LINES
from honeydoc.core import MOD32, Flag, IpAddr, MacAddr, Proto, Segment, seq_add
from honeydoc.dataplane import FlowEntry, MatchFields, Output, SwitchNode, match_segment
from honeydoc.decoys import DecoyClass, DecoyConfig, ServiceScript, Turn
from honeydoc.experiments import (
    PORT_HITS,
    exp_data_reduction,
    exp_latency,
    exp_sensibility,
    generate_attack_ports,
    histogram_pvalue,
)
from honeydoc.orchestrator import Mechanism
from honeydoc.rules import Action, ClassificationRule, Classifier
from honeydoc.scenario import SCENARIO_DIR, Scenario, TopologyParams, load_scenario, run
from honeydoc.simnet import AttackerModel, ConnectionPlan
from honeydoc.validate import count_fingerprint_violations, validate_handover
from honeydoc import kernels
from oracles import classify_ref, match_ref, seq_add_ref

GOLDEN_DUMP = """\
cookie=0x0, duration=0.000s, table=0, n_packets=0, n_bytes=0, priority=2,tcp,tp_dst=21 actions=CONTROLLER:65535
cookie=0x0, duration=0.000s, table=0, n_packets=0, n_bytes=0, priority=2,tcp,tp_dst=25 actions=CONTROLLER:65535
cookie=0x0, duration=0.000s, table=0, n_packets=0, n_bytes=0, priority=0,tcp actions=drop
"""


def report(n, ok, detail):
    line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_flow_translation_golden():
    t0 = time.perf_counter()
    dump = exp_sensibility(load_scenario(SCENARIO_DIR / "sensibility.scn")).dump
    elapsed = time.perf_counter() - t0
    ok = dump == GOLDEN_DUMP and elapsed < 1.0
    report(1, ok, f"flow-translation golden dump: exact={dump == GOLDEN_DUMP} "
                  f"runtime={elapsed:.3f}s (<1s)")


def test_2_handover_reproduction():
    t0 = time.perf_counter()
    trace = run(load_scenario(SCENARIO_DIR / "ssh-handover.scn")).trace
    checks = validate_handover(trace)
    elapsed = time.perf_counter() - t0
    failed = [c.name for c in checks if not c.ok]
    ok = not failed and len(checks) == 8 and elapsed < 1.0
    report(2, ok, f"M2 SSH handover: {len(checks) - len(failed)}/{len(checks)} assertions "
                  f"pass{' (failed: ' + ', '.join(failed) + ')' if failed else ''} "
                  f"runtime={elapsed:.3f}s (<1s)")


# -- 3: stream integrity --------------------------------------------------------

ATTACKER_IP = IpAddr.parse("10.1.0.2")
DECOY_IP = IpAddr.parse("10.1.1.2")
DECOY_MAC = MacAddr.parse("52:54:00:0a:01:02")
SSH_TO_HIH = [ClassificationRule("tcp", None, None, None, 22, Action.HIH, sid=1, priority=1)]


def _isn_samples(rng, n):
    edge = [MOD32 - 1 - k for k in range(50)] + list(range(50))
    out = []
    for i in range(n):
        def pick():
            return rng.choice(edge) if rng.random() < 0.4 else rng.getrandbits(32)
        out.append((pick(), pick(), pick()))
    # the exact wrap points, always
    out[:4] = [(MOD32 - 1, MOD32 - 1, 0), (0, MOD32 - 1, 0), (MOD32 - 50, 0, MOD32 - 1),
               (5, 7, 7)]
    return out


def _integrity_scenario(mech, attacker_isn, frontend_isn, backend_isn, turns, delay_us):
    replies = ServiceScript("echo", tuple(Turn(None, f"reply {i}\r\n".encode() * (i + 1))
                                          for i in range(len(turns))))
    mih = DecoyConfig("mih", DecoyClass.MIH, DECOY_IP, DECOY_MAC, 2, frozenset({22}),
                      {22: replies}, isn=frontend_isn if mech is Mechanism.M2 else None)
    hih = DecoyConfig("hih", DecoyClass.HIH, DECOY_IP, DECOY_MAC, 3, frozenset({22}),
                      {22: replies}, isn=backend_isn)
    plan = ConnectionPlan(0, ATTACKER_IP, 36093, DECOY_IP, 22, tuple(turns), attacker_isn)
    attacker = AttackerModel("attacker", ATTACKER_IP, MacAddr.parse("52:54:00:0a:00:02"),
                             plans=(plan,))
    return Scenario("integrity", mech, 1, SSH_TO_HIH, [mih, hih], [attacker],
                    TopologyParams(decision_delay_us=delay_us), frontend="mih",
                    controller_isn=frontend_isn if mech is Mechanism.M1 else None)


def test_3_stream_integrity():
    rng = random.Random(20240601)
    t0 = time.perf_counter()
    triples = _isn_samples(rng, 1000)
    runs = failures = violations = 0
    for mech in (Mechanism.M1, Mechanism.M2):
        for a_isn, f_isn, b_isn in triples:
            n_turns = rng.randint(1, 10)
            turns = [rng.randbytes(rng.choice([1, 40, 700, 3000])) for _ in range(n_turns)]
            delay = rng.choice([0, 0, 250_000, 700_000])
            r = run(_integrity_scenario(mech, a_isn, f_isn, b_isn, turns, delay))
            runs += 1
            (conn,) = r.attackers["attacker"].conns.values()
            stream = r.decoys["hih"].streams.get((ATTACKER_IP, 36093, 22))
            same = (stream is not None and bytes(conn.sent) == b"".join(turns)
                    and bytes(stream[0]) == bytes(conn.sent)
                    and bytes(stream[1]) == bytes(conn.received)
                    and conn.state == "CLOSED")
            failures += not same
            violations += count_fingerprint_violations(r.trace, ["attacker"])
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and violations == 0 and elapsed < 60
    report(3, ok, f"stream integrity: {len(triples)} ISN triples x 2 mechanisms = {runs} runs, "
                  f"stream mismatches={failures} fingerprint violations={violations} "
                  f"runtime={elapsed:.1f}s (<60s)")


# -- 4: latency ordering -------------------------------------------------------------

def test_4_latency_ordering():
    sc = load_scenario(SCENARIO_DIR / "smtp.scn")
    t0 = time.perf_counter()
    bad = []
    gaps = set()
    overhead = None
    for seed in range(20):
        rep = exp_latency(sc, n_connections=100, rate_per_s=10, seed=seed)
        overhead = rep.overhead_us
        counts = [len(rep.latencies(m)) for m in ("direct", "m1", "m2")]
        means = [rep.mean_ms(m) for m in ("direct", "m1", "m2")]
        gap_us = (means[1] - means[0]) * 1000
        gaps.add(round(gap_us, 6))
        if counts != [100, 100, 100] or not means[0] <= means[1] <= means[2] \
                or abs(gap_us - overhead) > 1:
            bad.append(seed)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 120
    verdict = "direct <= m1 <= m2 for 20/20 seeds" if not bad else f"failed for seeds {bad}"
    report(4, ok, f"latency ordering: {verdict}, m1-direct={sorted(gaps)}us "
                  f"overhead={overhead}us runtime={elapsed:.1f}s (<120s)")


# -- 5: data reduction ---------------------------------------------------------------------

def test_5_data_reduction():
    t0 = time.perf_counter()
    ports = generate_attack_ports(10_000, seed=11, off_fraction=0.9)
    rep = exp_data_reduction(ports, seed=11)
    p = histogram_pvalue(rep.before)
    elapsed = time.perf_counter() - t0
    off_share = sum(port not in PORT_HITS for port in ports) / len(ports)
    ok = (rep.n_connections >= 10_000 and rep.off_list(rep.after) == 0 and p > 0.01
          and elapsed < 30)
    report(5, ok, f"data reduction: {rep.n_connections} connections ({off_share:.1%} off-list), "
                  f"off-list deliveries after={rep.off_list(rep.after)} chi-square p={p:.3f} "
                  f"runtime={elapsed:.1f}s (<30s)")


# -- 6: oracle equivalence -----------------------------------------------------------------

def _random_segment(rng):
    proto = rng.choice([Proto.TCP, Proto.UDP])
    payload = rng.choice([b"", b"USER x", b"SSH-2.0", rng.randbytes(6)])
    return Segment(MacAddr(1), MacAddr(2), IpAddr(rng.randint(1, 3)), IpAddr(rng.randint(1, 3)),
                   proto, rng.randint(20, 22), rng.randint(20, 22),
                   Flag.ACK if proto == Proto.TCP else Flag(0), 0, 0, payload)


def _maybe(rng, value):
    return value if rng.random() < 0.5 else None


def test_6_oracle_equivalence():
    rng = random.Random(6)
    match_bad = 0
    for _ in range(10_000):
        table = [FlowEntry(rng.randint(0, 4), MatchFields(
            in_port=_maybe(rng, rng.randint(1, 3)), proto=_maybe(rng, rng.choice(list(Proto))),
            src_ip=_maybe(rng, IpAddr(rng.randint(1, 3))),
            dst_ip=_maybe(rng, IpAddr(rng.randint(1, 3))),
            src_port=_maybe(rng, rng.randint(20, 22)), dst_port=_maybe(rng, rng.randint(20, 22))),
            (Output(1),)) for _ in range(rng.randint(0, 12))]
        sw = SwitchNode("fcf")
        for e in table:
            sw.install(e)
        seg = _random_segment(rng)
        in_port = rng.randint(1, 3)
        match_bad += match_segment(sw, seg, in_port) is not match_ref(table, seg, in_port)

    classify_bad = 0
    for _ in range(10_000):
        rules = [ClassificationRule(
            rng.choice(["tcp", "udp", "any"]), _maybe(rng, IpAddr(rng.randint(1, 3))),
            _maybe(rng, rng.randint(20, 22)), _maybe(rng, IpAddr(rng.randint(1, 3))),
            _maybe(rng, rng.randint(20, 22)), rng.choice(list(Action)),
            _maybe(rng, rng.randint(1, 50)), rng.randint(0, 3),
            _maybe(rng, rng.choice([b"USER", b"SSH", b"x"])))
            for _ in range(rng.randint(0, 10))]
        seg = _random_segment(rng)
        got = Classifier(rules).classify(seg)
        ref = classify_ref(rules, seg)
        same = (got is None and ref is None) or (
            got is not None and ref is not None
            and (got.action, got.sid, got.matched_rule_priority) == (ref.action, ref.sid,
                                                                   ref.priority))
        classify_bad += not same

    boundary = [0, 1, 2, 2**31 - 1, 2**31, 2**31 + 1, MOD32 - 2, MOD32 - 1]
    deltas = [0, 1, -1, 2, -2, 2**31 - 1, -(2**31), 2**31, MOD32 - 2, -(MOD32 - 2), MOD32 - 1,
              -(MOD32 - 1)]
    pairs = [(b, d) for b in boundary for d in deltas]
    pairs += [(rng.getrandbits(32), rng.randint(-(MOD32 - 1), MOD32 - 1)) for _ in range(10_000)]
    seq_bad = sum(seq_add(b, d) != seq_add_ref(b, d) or kernels.seq_add(b, d) != seq_add_ref(b, d)
                  for b, d in pairs)
    ok = match_bad == classify_bad == seq_bad == 0
    report(6, ok, f"oracle equivalence ({kernels.BACKEND} kernels): match 10000 pairs "
                  f"mismatches={match_bad}, classify 10000 pairs mismatches={classify_bad}, "
                  f"seq_add {len(pairs)} pairs mismatches={seq_bad}")


# -- 7: determinism --------------------------------------------------------------------------

def test_7_determinism(tmp_path):
    names = sorted(p.name for p in SCENARIO_DIR.glob("*.scn"))
    differing = []
    for name in names:
        outs = []
        for i, hashseed in enumerate(("1", "2")):
            out = tmp_path / f"{name}.{i}.trace"
            env = dict(os.environ, PYTHONHASHSEED=hashseed)
            env.pop("HONEYDOC_SEED", None)
            subprocess.run([sys.executable, "-m", "honeydoc", "run", str(SCENARIO_DIR / name),
                            "-o", str(out)], env=env, check=True, capture_output=True)
            outs.append(out.read_bytes())
        if outs[0] != outs[1]:
            differing.append(name)
    ok = not differing
    report(7, ok, f"determinism: {len(names) - len(differing)}/{len(names)} bundled scenarios "
                  f"byte-identical across two runs")
