import pytest
from hypothesis import given
from hypothesis import strategies as st

from honeydoc.core import Flag, Kind, make_segment, seq_add
from honeydoc.orchestrator import (
    PRIO_TAP,
    ConnectionRecord,
    Mechanism,
    Phase,
    PhaseError,
    compute_diffs,
)
from honeydoc.scenario import SCENARIO_DIR, ScenarioError, build, load_scenario, run
from honeydoc.validate import check_trace, first_failure, validate_handover
from scenario_kit import attacker, scenario

u32 = st.integers(0, 2**32 - 1)

SSH_RULES = """\
alert tcp any any -> any 22 (msg:"HIH"; sid:1; priority:1;)
alert tcp any any -> any any (msg:"DROP"; sid:9;)
"""

TWO_DECOYS = """
[scenario]
mechanism = {mech}
seed = 3
horizon_ms = {horizon}
rules = test.rules
{extra}

[topology]
decision_delay_ms = {delay}

[decoy mih]
class = MIH
ip = 10.1.1.2
mac = 52:54:00:0a:01:02
port = 2
open_ports = {mih_ports}
scripts = {mih_scripts}

[decoy hih]
class = HIH
ip = 10.1.1.2
mac = 52:54:00:0a:01:02
port = 3
open_ports = {hih_ports}
{hih_extra}
"""


def two_decoys(tmp_path, mech="m2", rules=SSH_RULES, horizon=6000, delay=0, extra="",
               mih_ports="22", mih_scripts="22:ssh-banner", hih_ports="22", hih_extra="",
               att=None):
    body = TWO_DECOYS.format(mech=mech, horizon=horizon, delay=delay, extra=extra,
                             mih_ports=mih_ports, mih_scripts=mih_scripts,
                             hih_ports=hih_ports, hih_extra=hih_extra)
    return scenario(tmp_path, body + (att if att is not None else attacker()), rules)


def events(trace, event):
    return [ev for ev in trace.of_kind(Kind.DECISION) if ev.detail.get("event") == event]


@given(u32, u32)
def test_diffs_map_between_isn_spaces(front, back):
    ack, seq = compute_diffs(front, back)
    assert seq_add(front, ack) == back
    assert seq_add(back, seq) == front
    assert -2**31 <= ack < 2**31


def test_equal_isns_give_zero_diffs():
    assert compute_diffs(77, 77) == (0, 0)


def _record():
    return ConnectionRecord(make_segment("1.1.1.1:1", "2.2.2.2:2", flags=["SYN"]).five_tuple,
                            Mechanism.M2, 1, 1, None)


@pytest.mark.parametrize("path", [
    [Phase.P3],
    [Phase.P2, Phase.P1],
    [Phase.P2, Phase.P3, Phase.P2],
    [Phase.TERMINATED, Phase.P2],
    [Phase.P2, Phase.P3, Phase.TERMINATED],
])
def test_illegal_phase_transitions(path):
    rec = _record()
    with pytest.raises(PhaseError):
        for phase in path:
            rec.advance(phase)


def test_p3_requires_sync_state():
    rec = _record()
    rec.advance(Phase.P2)
    rec.phase = Phase.P3
    with pytest.raises(PhaseError):
        rec.check()


def test_stored_payload_cleared_on_p3():
    rec = _record()
    rec.advance(Phase.P2)
    rec.stored_payload = make_segment("1.1.1.1:1", "2.2.2.2:2", flags=["ACK"], payload=b"x")
    rec.backend_isn, rec.ack_diff = 5, 4
    rec.advance(Phase.P3)
    assert rec.stored_payload is None
    rec.check()


def test_mih_rule_without_mih_is_config_error(tmp_path):
    body = TWO_DECOYS.format(mech="m1", horizon=10, delay=0, extra="", mih_ports="22",
                             mih_scripts="22:ssh-banner", hih_ports="22", hih_extra="")
    body = body.replace("[decoy mih]\nclass = MIH", "[decoy mih]\nclass = HIH")
    sc = scenario(tmp_path, body, 'alert tcp any any -> any 22 (msg:"MIH"; sid:4;)\n')
    with pytest.raises(ScenarioError, match="needs an MIH"):
        build(sc)


def test_m1_handover_passes_validator():
    sc = load_scenario(SCENARIO_DIR / "ssh-handover.scn").with_mechanism("m1")
    r = run(sc)
    checks = validate_handover(r.trace) + check_trace(r.trace)
    assert first_failure(checks) is None, [c.line() for c in checks if not c.ok]


def test_payload_classified_once_despite_retransmissions():
    r = run(load_scenario(SCENARIO_DIR / "ssh-handover.scn"))
    (rec,) = r.controller.records.values()
    assert r.controller.classify_counts[rec.key] == 1
    assert rec.absorbed >= 1
    assert rec.history == [Phase.P1, Phase.P2, Phase.P3]


def test_m1_closed_port_is_silent(tmp_path):
    rules = 'alert tcp any any -> any 23 (msg:"MIH"; sid:2;)\n' + SSH_RULES
    sc = two_decoys(tmp_path, "m1", rules, att=attacker("10.1.1.2:23", max_retries=1))
    r = run(sc)
    to_attacker = [ev for ev in r.trace.of_kind(Kind.FRAME) if ev.endpoints()[1] == "attacker"]
    assert to_attacker == []
    assert not r.controller.records
    assert r.attackers["attacker"].abandoned == 1


def test_unmatched_payload_is_dropped(tmp_path):
    rules = 'alert tcp any any -> any 22 (msg:"HIH"; content:"SSH-"; sid:1; priority:1;)\n'
    sc = two_decoys(tmp_path, "m2", rules, att=attacker(sends=("GET / HTTP/1.0\\r\\n",)))
    r = run(sc)
    (dec,) = events(r.trace, "decision")
    assert dec.detail["decision"] == "drop"
    reasons = [ev.detail["reason"] for ev in r.trace.of_kind(Kind.TERMINATED)]
    assert "dropped" in reasons
    rst = [ev for ev in r.trace.of_kind(Kind.FRAME)
           if ev.location == "fcf>mih" and ev.segment.flags & Flag.RST]
    assert len(rst) == 1
    assert not [ev for ev in r.trace.of_kind(Kind.FRAME) if "hih" in ev.location]


def test_mih_decision_stays_on_frontend(tmp_path):
    rules = 'alert tcp any any -> any 22 (msg:"MIH"; sid:3;)\n'
    sc = two_decoys(tmp_path, "m2", rules, att=attacker(sends=("SSH-2.0-x\\r\\n",)))
    r = run(sc)
    (dec,) = events(r.trace, "decision")
    assert dec.detail["decision"] == "forward" and dec.detail["migrate"] == "no"
    assert not events(r.trace, "sync")
    (host,) = r.attackers.values()
    (conn,) = host.conns.values()
    assert conn.state == "CLOSED"
    assert first_failure(check_trace(r.trace)) is None


def test_handshake_timeout_terminates(tmp_path):
    # the backend has port 22 closed, so the replayed SYN only gets a RST
    sc = two_decoys(tmp_path, "m2", hih_ports="80", horizon=8000)
    r = run(sc)
    term = [ev for ev in r.trace.of_kind(Kind.TERMINATED) if ev.location == "controller"]
    assert [ev.detail["reason"] for ev in term] == ["handshake-timeout"]
    (rec,) = r.controller.records.values()
    assert rec.phase is Phase.TERMINATED and rec.stored_payload is None
    p2 = next(ev.time for ev in events(r.trace, "phase") if ev.detail["phase"] == "P2")
    assert term[0].time - p2 == 3_000_000


def test_forced_equal_isns_give_zero_diff(tmp_path):
    sc = two_decoys(tmp_path, "m1", extra="controller_isn = 5000", hih_extra="isn = 5000",
                    att=attacker(sends=("SSH-2.0-x\\r\\n", "more\\r\\n")))
    r = run(sc)
    (sync,) = events(r.trace, "sync")
    assert sync.detail["ack_diff"] == "0" and sync.detail["seq_diff"] == "0"
    (conn,) = r.attackers["attacker"].conns.values()
    assert bytes(conn.sent) == b"SSH-2.0-x\r\nmore\r\n"
    assert conn.received == r.decoys["hih"].streams[(sc.attackers[0].ip, 40100, 22)][1]


def test_round_robin_within_class(tmp_path):
    body = """
[scenario]
mechanism = m1
seed = 1
rules = test.rules
""" + "".join(f"""
[decoy m{i}]
class = MIH
ip = 10.1.1.{i}
mac = 52:54:00:0a:01:0{i}
port = {i + 1}
open_ports = 22
""" for i in (1, 2, 3))
    sc = scenario(tmp_path, body, 'alert tcp any any -> any 22 (msg:"MIH"; sid:3;)\n')
    ctl = build(sc).controller
    from honeydoc.decoys import DecoyClass
    picks = [ctl.select(DecoyClass.MIH) for _ in range(5)]
    assert picks == ["m1", "m2", "m3", "m1", "m2"]


def test_controller_channel_timing():
    r = run(load_scenario(SCENARIO_DIR / "ssh-handover.scn"))
    syn_at_fcf = next(ev.time for ev in r.trace.of_kind(Kind.FRAME)
                      if ev.location == "attacker>fcf")
    tap = next(ev for ev in r.trace.of_kind(Kind.FLOW) if ev.detail["priority"] == str(PRIO_TAP))
    # PacketIn (channel + processing) then FlowMod back over the channel
    assert tap.time - syn_at_fcf == 5000 + 2000 + 5000
    syn_to_mih = next(ev.time for ev in r.trace.of_kind(Kind.FRAME) if ev.location == "fcf>mih")
    assert syn_to_mih - syn_at_fcf == 5000 + 2000 + 5000 + 1000


def _frontend_segment(rec, flags="PSH|ACK"):
    k = rec.key
    return make_segment(f"{k.dst_ip}:{k.dst_port}", f"{k.src_ip}:{k.src_port}",
                        flags=flags.split("|"), seq=seq_add(rec.frontend_isn, 1),
                        ack=seq_add(rec.attacker_isn, 44), payload=b"late")


def _attacker_frames(trace):
    return [ev for ev in trace.of_kind(Kind.FRAME) if ev.endpoints()[1] == "attacker"]


@pytest.mark.parametrize("phase", [Phase.P2, Phase.P3])
def test_frontend_segments_dropped_after_decision(phase):
    sc = load_scenario(SCENARIO_DIR / "ssh-handover.scn")
    full = run(sc)
    when = next(ev.time for ev in events(full.trace, "phase")
                if ev.detail["phase"] == phase.name)
    r = build(sc)
    r.sim.horizon_us = when + 1
    r.sim.run()
    (rec,) = r.controller.records.values()
    assert rec.phase is phase
    before = len(_attacker_frames(r.trace))
    r.controller.on_packet_in("fcf", _frontend_segment(rec), 2)
    r.sim.horizon_us = when + 2000  # shorter than any pending attacker-bound frame
    r.sim.run()
    assert rec.dropped_frontend == 1
    (ev,) = events(r.trace, "drop-frontend")
    assert ev.detail["flags"] == "PSH|ACK"
    assert len(_attacker_frames(r.trace)) == before


def test_duplicate_syn_in_p1_resends_synack():
    sc = load_scenario(SCENARIO_DIR / "ssh-handover.scn").with_mechanism("m1")
    r = build(sc)
    r.sim.horizon_us = 1
    r.sim.run()
    syn = make_segment("10.1.0.2:50000", "10.1.1.2:22", flags=["SYN"], seq=10)
    r.controller.on_packet_in("fcf", syn, 1)
    r.controller.on_packet_in("fcf", syn, 1)
    r.sim.horizon_us = 20_000
    r.sim.run()
    assert len([k for k in r.controller.records if k.src_port == 50000]) == 1
    synacks = [ev for ev in _attacker_frames(r.trace) if ev.segment.dst_port == 50000]
    assert len(synacks) == 2 and synacks[0].segment.seq == synacks[1].segment.seq


UDP_RULES = """\
alert udp any any -> any 5060 (msg:"MIH"; sid:7;)
alert tcp any any -> any 22 (msg:"HIH"; sid:1;)
"""


def test_udp_flow_classified_per_datagram_flow(tmp_path):
    body = """
[scenario]
mechanism = m2
seed = 1
rules = test.rules
frontend = mih

[script sip]
turn.1 = | SIP/2.0 200 OK\\r\\n | SIP

[decoy mih]
class = MIH
ip = 10.1.1.2
mac = 52:54:00:0a:01:02
port = 2
udp_ports = 5060
scripts = 5060:sip

[decoy hih]
class = HIH
ip = 10.1.1.2
mac = 52:54:00:0a:01:02
port = 3
open_ports = 22
""" + attacker(sends=())
    r = build(scenario(tmp_path, body, UDP_RULES))
    r.sim.horizon_us = 1
    r.sim.run()
    for i in range(2):
        dgram = make_segment("10.1.0.2:5555", "10.1.1.2:5060", proto="udp", payload=b"OPTIONS")
        r.sim.at(1000 + i * 50_000, r.sim.nodes["fcf"].receive, 1, dgram)
    r.sim.horizon_us = 200_000
    r.sim.run()
    assert len(r.controller.udp_flows) == 1
    (key,) = r.controller.classify_counts
    assert r.controller.classify_counts[key] == 1
    assert [e.stage for e in r.decoys["mih"].log] == ["SIP", "SIP"]
    replies = [ev for ev in _attacker_frames(r.trace) if ev.segment.payload.startswith(b"SIP")]
    assert len(replies) == 2


OUTBOUND = """
[scenario]
mechanism = m1
seed = 1
rules = test.rules

[policy]
default = {default}
redirect.9.9.9.9:80 = sink

[decoy hih]
class = HIH
ip = 10.1.1.2
mac = 52:54:00:0a:01:02
port = 3
open_ports = 22

[decoy sink]
class = LIH
ip = 10.1.1.9
mac = 52:54:00:0a:01:09
port = 4
open_ports = 80
transparent = yes
"""


@pytest.mark.parametrize("default,dst,expect,target", [
    ("discard", "9.9.9.9:80", "redirect", "sink"),
    ("discard", "8.8.8.8:80", "drop", "-"),
    ("allow", "8.8.8.8:80", "forward", "external"),
])
def test_outbound_policy(tmp_path, default, dst, expect, target):
    sc = scenario(tmp_path, OUTBOUND.format(default=default) + attacker(sends=()),
                  'alert tcp any any -> any 22 (msg:"HIH"; sid:1;)\n')
    r = build(sc)
    syn = make_segment(f"10.1.1.2:33000", dst, flags=["SYN"], seq=1)
    r.sim.at(0, r.sim.nodes["fcf"].receive, 3, syn)
    r.sim.horizon_us = 100_000
    r.sim.run()
    (ev,) = events(r.trace, "outbound")
    assert (ev.detail["decision"], ev.detail["target"]) == (expect, target)
    delivered = {e.location for e in r.trace.of_kind(Kind.FRAME)
                 if e.segment.src_port == 33000}
    if expect == "redirect":
        assert "spf-sink>sink" in delivered
    elif expect == "forward":
        assert "fcf>attacker" in delivered
    else:
        assert delivered == set()


def test_outbound_without_policy_is_not_tapped():
    r = build(load_scenario(SCENARIO_DIR / "ssh-handover.scn"))
    r.sim.run()
    cookies = {e.cookie for e in r.fcf.table}
    assert 0x2 not in cookies


def test_redirect_target_must_be_transparent(tmp_path):
    body = OUTBOUND.format(default="discard").replace("transparent = yes", "transparent = no")
    sc = scenario(tmp_path, body, 'alert tcp any any -> any 22 (msg:"HIH"; sid:1;)\n')
    with pytest.raises(ScenarioError, match="transparent"):
        build(sc)
