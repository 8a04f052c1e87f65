"""Trace checks.

Everything here works from a trace alone, so a written trace file can be
re-validated later without the scenario that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

from honeydoc.core import MOD32, Flag, Kind, Proto, seq_diff


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    message: str = ""

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}" + (
            f": {self.message}" if self.message else "")


class ValidationError(AssertionError):
    def __init__(self, check: Check):
        super().__init__(check.line())
        self.check = check


def first_failure(checks):
    for c in checks:
        if not c.ok:
            return c
    return None


def _conn_key(seg):
    a = (seg.src_ip.value, seg.src_port)
    b = (seg.dst_ip.value, seg.dst_port)
    return (a, b) if a < b else (b, a)


def _undirected(location):
    a, _, b = location.partition(">")
    return (a, b) if a < b else (b, a)


def frames(trace, location=None, conn=None, node=None):
    """FrameDelivered events, optionally restricted to one directed link,
    one connection (five-tuple, either direction) or frames touching a node."""
    key = None if conn is None else _conn_key_tuple(conn)
    out = []
    for ev in trace:
        if ev.kind is not Kind.FRAME:
            continue
        if location is not None and ev.location != location:
            continue
        if node is not None and node not in ev.endpoints():
            continue
        if key is not None and _conn_key(ev.segment) != key:
            continue
        out.append(ev)
    return out


def _conn_key_tuple(ft):
    a = (ft.src_ip.value, ft.src_port)
    b = (ft.dst_ip.value, ft.dst_port)
    return (a, b) if a < b else (b, a)


# ---------------------------------------------------------------------------
# generic checks

def check_time_order(trace):
    prev = None
    for i, ev in enumerate(trace):
        if prev is not None and ev.time < prev:
            return Check("time-order", False, f"event {i} at {ev.time}us precedes {prev}us")
        prev = ev.time
    return Check("time-order", True)


def check_acks(trace):
    """No endpoint acknowledges bytes its peer never put on that link.

    Only links where the connection's SYN was seen are checked; elsewhere
    the numbers are absolute and carry no base to compare against.
    """
    sent_end = {}  # (link, conn, sender endpoint) -> furthest relative end
    opened = set()
    for ev in trace:
        if ev.kind is not Kind.FRAME or ev.segment.proto != Proto.TCP:
            continue
        seg = ev.segment
        link = _undirected(ev.location)
        conn = _conn_key(seg)
        src = (seg.src_ip.value, seg.src_port)
        dst = (seg.dst_ip.value, seg.dst_port)
        if seg.flags & Flag.SYN and not seg.flags & Flag.ACK:
            for k in [k for k in sent_end if k[0] == link and k[1] == conn]:
                del sent_end[k]
            opened.add((link, conn))
        if (link, conn) not in opened:
            continue
        end = (ev.relseq + seg.seq_len()) % MOD32
        key = (link, conn, src)
        if key not in sent_end or seq_diff(end, sent_end[key]) > 0:
            sent_end[key] = end
        if ev.relack is not None and not seg.flags & Flag.RST:
            peer = sent_end.get((link, conn, dst))
            if peer is None or seq_diff(ev.relack, peer) > 0:
                return Check("ack-bounds", False,
                             f"{ev.location} at {ev.time}us acks {ev.relack} but peer sent "
                             f"only up to {peer}")
    return Check("ack-bounds", True)


def attacker_nodes(trace):
    """Senders of connection-opening SYNs that did not come from a switch or decoy."""
    decoys = {ev.location for ev in trace if ev.kind is Kind.DECOY_LOG}
    names = []
    for ev in trace:
        if ev.kind is Kind.FRAME and ev.segment.flags & Flag.SYN \
                and not ev.segment.flags & Flag.ACK:
            sender = ev.endpoints()[0]
            if sender in decoys or sender.startswith(("fcf", "spf-")) or sender in names:
                continue
            names.append(sender)
    return names


def _fingerprint_violations(trace, attackers=None):
    attackers = attacker_nodes(trace) if attackers is None else attackers
    for name in attackers:
        contacted = set()
        mac_of = {}
        for ev in trace:
            if ev.kind is not Kind.FRAME:
                continue
            sender, receiver = ev.endpoints()
            seg = ev.segment
            if sender == name:
                contacted.add((seg.dst_ip, seg.dst_port, seg.src_ip, seg.src_port))
            elif receiver == name:
                if (seg.src_ip, seg.src_port, seg.dst_ip, seg.dst_port) not in contacted:
                    yield (f"{name} received a frame from {seg.src_ip}:{seg.src_port} "
                           f"it never contacted at {ev.time}us")
                    continue
                seen = mac_of.setdefault(seg.src_ip, seg.src_mac)
                if seen != seg.src_mac:
                    yield f"{seg.src_ip} showed {name} two MACs ({seen}, {seg.src_mac})"


def check_stealth(trace, attackers=None):
    """Frames reaching an attacker come from the address it contacted,
    and each contacted IP shows the attacker one MAC only."""
    for message in _fingerprint_violations(trace, attackers):
        return Check("fingerprint", False, message)
    return Check("fingerprint", True)


def count_fingerprint_violations(trace, attackers=None):
    return sum(1 for _ in _fingerprint_violations(trace, attackers))


def check_trace(trace):
    return [check_time_order(trace), check_acks(trace), check_stealth(trace)]


# ---------------------------------------------------------------------------
# handover

def _handshake(evs, label):
    want = [(Flag.SYN, 0, None), (Flag.SYN | Flag.ACK, 0, 1), (Flag.ACK, 1, 1)]
    got = [(ev.segment.flags, ev.relseq, ev.relack) for ev in evs[:3]]
    ok = len(got) == 3 and all(g == w for g, w in zip(got, want))
    shown = "; ".join(f"{f.name if f else '-'} seq={s} ack={a}" for f, s, a in got)
    return Check(f"{label}-handshake", ok, "" if ok else f"got {shown}")


def _decision_events(trace, event):
    return [ev for ev in trace if ev.kind is Kind.DECISION and ev.detail.get("event") == event]


def validate_handover(trace, first_len=43):
    """Checks for one migrated connection; returns a list of Check."""
    checks = []
    syns = [ev for ev in trace if ev.kind is Kind.FRAME
            and ev.segment.flags & Flag.SYN and not ev.segment.flags & Flag.ACK]
    if not syns:
        return [Check("connection", False, "trace has no SYN")]
    opening = syns[0]
    attacker = opening.endpoints()[0]
    conn = opening.segment.five_tuple
    label = f"{conn.src_ip}:{conn.src_port}>{conn.dst_ip}:{conn.dst_port}"

    a_frames = frames(trace, conn=conn, node=attacker)
    checks.append(_handshake(a_frames, "attacker"))

    from_a = [ev for ev in a_frames if ev.endpoints()[0] == attacker]
    payloads = [ev for ev in from_a if ev.segment.payload]
    if not payloads:
        checks.append(Check("first-payload", False, "attacker sent no payload"))
        return checks
    first = payloads[0]
    ok = len(first.segment.payload) == first_len and first.relseq == 1 and first.relack == 1
    checks.append(Check("first-payload", ok,
                        "" if ok else f"len={len(first.segment.payload)} seq={first.relseq} "
                                      f"ack={first.relack}"))

    syncs = [ev for ev in _decision_events(trace, "sync") if ev.detail.get("conn") == label]
    if not syncs:
        checks.append(Check("migrated", False, "no synchronization event for the connection"))
        return checks
    sync = syncs[0]
    backend = sync.detail["target"]
    checks.append(Check("migrated", True, f"synchronized with {backend}"))
    end = 1 + first_len
    to_a = [ev for ev in a_frames if ev.endpoints()[1] == attacker]
    acked = [ev for ev in to_a if ev.relack is not None and ev.time >= sync.time
             and seq_diff(ev.relack, end) >= 0]
    ok = bool(acked) and acked[0].relack == end
    checks.append(Check("attacker-ack", ok,
                        f"attacker observed ack={end} at {acked[0].time}us" if ok
                        else f"attacker never observed ack={end} after migration"))
    t_ack = acked[0].time if acked else None

    first_copies = [ev for ev in payloads if ev.relseq == 1]
    before = [ev for ev in first_copies if t_ack is None or ev.time < t_ack]
    after = [ev for ev in first_copies if t_ack is not None and ev.time > t_ack]
    checks.append(Check("retransmissions", len(before) >= 2 and not after,
                        f"{len(before) - 1} retransmission(s) before migration, "
                        f"{len(after)} after"))

    b_link = frames(trace, conn=conn, node=backend)
    checks.append(_handshake(b_link, "backend"))
    b_payload = [ev for ev in b_link if ev.endpoints()[1] == backend
                 and ev.segment.payload and ev.relseq == 1]
    ok = len(b_payload) == 1 and len(b_payload[0].segment.payload) == first_len \
        and b_payload[0].relack == 1
    checks.append(Check("backend-payload", ok,
                        f"{len(b_payload)} delivery(ies) of the first payload at {backend}"))

    decisions = [ev for ev in _decision_events(trace, "decision")
                 if ev.detail.get("conn") == label]
    mechanism = decisions[0].detail.get("mechanism") if decisions else None
    frontend = decisions[0].detail.get("frontend") if decisions else None
    term = [ev for ev in trace if ev.kind is Kind.TERMINATED and ev.detail.get("conn") == label]
    if mechanism == "M2":
        rst = [ev for ev in frames(trace, conn=conn, node=frontend)
               if ev.endpoints()[1] == frontend and ev.segment.flags & Flag.RST]
        ok = bool(rst) and any(ev.detail.get("reason") == "migrated" for ev in term)
        checks.append(Check("old-connection", ok,
                            f"frontend {frontend} reset" if ok
                            else f"frontend {frontend} connection not terminated"))
    else:
        ok = any(ev.detail.get("reason") == "controller-released" for ev in term)
        checks.append(Check("old-connection", ok,
                            "controller endpoint released" if ok
                            else "controller endpoint not released"))
    return checks


def flow_graph(trace, node_a, node_b, conn=None):
    """Wireshark-like rows for the frames between two adjacent nodes."""
    rows = []
    for ev in trace:
        if ev.kind is not Kind.FRAME:
            continue
        a, b = ev.endpoints()
        if {a, b} != {node_a, node_b}:
            continue
        if conn is not None and _conn_key(ev.segment) != _conn_key_tuple(conn):
            continue
        seg = ev.segment
        flags = ", ".join(f.name for f in (Flag.SYN, Flag.PSH, Flag.ACK, Flag.FIN, Flag.RST)
                          if seg.flags & f)
        if seg.payload:
            flags += f" - Len: {len(seg.payload)}"
        arrow = "->" if a == node_a else "<-"
        ack = "" if ev.relack is None else f" Ack = {ev.relack}"
        rows.append(f"{ev.time / 1e6:.6f}\t{seg.src_port if a == node_a else seg.dst_port}"
                    f"\t{arrow} {flags}\tSeq = {ev.relseq}{ack}")
    return rows
