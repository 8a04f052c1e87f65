"""Control plane: decision engine and redirection engine.

The controller sees PacketIns from the FCF and the SPFs, classifies the
first payload of each connection, and carries out Drop / Forward /
Redirect. Redirection hands a live TCP connection to another decoy by
replaying the handshake with the attacker's original ISN and installing
Seq/Ack diff entries on the target's SPF.

Mechanism M1 answers the attacker's handshake from the controller itself;
M2 lets a frontend decoy answer and migrates only when the decision says
so. DIRECT installs static forwarding and never consults the controller.
"""

from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass, field

from honeydoc.core import (
    FiveTuple,
    Flag,
    Kind,
    Proto,
    Segment,
    format_flags,
    seq_add,
    seq_diff,
)
from honeydoc.dataplane import (
    FlowEntry,
    MatchFields,
    Output,
    RewriteDst,
    SetTcpAckDiff,
    SetTcpSeqDiff,
    ToController,
)
from honeydoc.decoys import DecoyClass
from honeydoc.rules import Action, Classifier, translate_rules

PRIO_TAP = 65200
PRIO_CONN = 65100
PRIO_OUTBOUND = 65000
MAX_RULE_PRIORITY = PRIO_OUTBOUND - 1

# cookie ranges
COOKIE_RULES = 0x0
COOKIE_STATIC = 0x1
COOKIE_OUTBOUND = 0x2
_CONN_COOKIE_BASE = 0x1000


class ConfigError(ValueError):
    pass


class Mechanism(str, enum.Enum):
    DIRECT = "direct"
    M1 = "m1"
    M2 = "m2"


class Phase(str, enum.Enum):
    P1 = "P1_Established"
    P2 = "P2_Migrating"
    P3 = "P3_Synchronized"
    TERMINATED = "Terminated"


_ALLOWED = {
    Phase.P1: {Phase.P2, Phase.TERMINATED},
    Phase.P2: {Phase.P3, Phase.TERMINATED},
    Phase.P3: set(),
    Phase.TERMINATED: set(),
}


class PhaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class Decision:
    kind: str  # "drop" | "forward" | "redirect"
    decoy: str | None = None

    def __str__(self):
        return self.kind if self.decoy is None else f"{self.kind}:{self.decoy}"


DROP = Decision("drop")


@dataclass
class OutboundPolicy:
    default: str = "discard"  # or "allow"
    redirect_map: dict = field(default_factory=dict)  # (IpAddr, port) -> decoy name

    def __post_init__(self):
        if self.default not in ("discard", "allow"):
            raise ConfigError(f"outbound default must be discard or allow, not {self.default!r}")


@dataclass
class ConnectionRecord:
    key: FiveTuple  # attacker -> decoy direction
    mechanism: Mechanism
    attacker_isn: int
    attacker_port: int
    attacker_mac: object
    frontend_isn: int | None = None
    backend_isn: int | None = None
    phase: Phase = Phase.P1
    stored_payload: Segment | None = None
    stored_end: int | None = None
    target: str | None = None
    frontend: str | None = None
    ack_diff: int | None = None
    seq_diff: int | None = None
    decision: Decision | None = None
    classifying: bool = False
    cookie: int = 0
    tap_cookie: int = 0
    frontend_closed: bool = False
    dropped_frontend: int = 0
    absorbed: int = 0
    history: list = field(default_factory=list)

    def advance(self, phase: Phase):
        if phase not in _ALLOWED[self.phase]:
            raise PhaseError(f"{self.key}: illegal transition {self.phase.value} -> {phase.value}")
        self.phase = phase
        self.history.append(phase)
        if phase is Phase.P3:
            self.stored_payload = None

    def check(self):
        migrating = self.phase in (Phase.P2, Phase.P3)
        has_sync = self.backend_isn is not None and self.ack_diff is not None
        if self.phase is Phase.P3 and not has_sync:
            raise PhaseError("P3 without backend ISN and diffs")
        if has_sync and not migrating and self.phase is not Phase.TERMINATED:
            raise PhaseError("diffs present outside migration")
        if self.stored_payload is not None and self.phase is not Phase.P2:
            raise PhaseError("stored payload outside P2")


def compute_diffs(frontend_isn: int, backend_isn: int) -> tuple[int, int]:
    """``(ack_diff, seq_diff)`` for moving a connection between ISN spaces.

    ``ack_diff`` is added to ACK fields flowing attacker -> backend;
    ``seq_diff`` (its negation) to SEQ fields flowing backend -> attacker.
    """
    ack = seq_diff(backend_isn, frontend_isn)
    return ack, -ack


@dataclass
class DecoySite:
    """Where a decoy hangs off the data plane."""

    config: object
    fcf_port: int
    spf: str | None = None
    spf_up: int = 1
    spf_down: int = 2


def _conn_label(ft: FiveTuple):
    return f"{ft.src_ip}:{ft.src_port}>{ft.dst_ip}:{ft.dst_port}"


class Controller:
    def __init__(self, sim, *, rules, sites: dict, mechanism: Mechanism, fcf: str,
                 attacker_ports: dict, seed=0, frontend=None, direct_target=None,
                 policy: OutboundPolicy | None = None, handshake_timeout_ms=3000,
                 decision_delay_ms=0, flow_idle_timeout_ms=None, isn=None):
        self.sim = sim
        self.rules = list(rules)
        self.sites = sites
        self.mechanism = Mechanism(mechanism)
        self.fcf = fcf
        self.attacker_ports = dict(attacker_ports)  # port -> attacker node name
        self.rng = random.Random(f"{seed}/controller")
        self.frontend = frontend
        self.direct_target = direct_target
        self.policy = policy
        self.handshake_timeout_us = round(handshake_timeout_ms * 1000)
        self.decision_delay_us = round(decision_delay_ms * 1000)
        self.idle_us = None if flow_idle_timeout_ms is None else round(flow_idle_timeout_ms * 1000)
        self.forced_isn = isn
        self.classifier = Classifier(self.rules)
        self.records: dict = {}
        self.udp_flows: dict = {}
        self.classify_counts: dict = {}
        self.outbound_log: list = []
        self._rr = {DecoyClass.LIH: 0, DecoyClass.MIH: 0, DecoyClass.HIH: 0}
        self._cookies = itertools.count(_CONN_COOKIE_BASE)
        self._decoy_ports = {s.fcf_port: name for name, s in sites.items()}
        self._spf_down = {s.spf: name for name, s in sites.items() if s.spf}
        self._open_ports = {}
        for s in sites.values():
            self._open_ports.setdefault(s.config.ip, set()).update(s.config.open_ports)
        self._advertised = {}
        for s in sites.values():
            self._advertised.setdefault(s.config.ip, s.config.mac)
        self._validate()

    # -- setup ---------------------------------------------------------------

    def decoys_of(self, cls):
        return [n for n, s in self.sites.items() if s.config.decoy_class is cls]

    def _validate(self):
        for rule in self.rules:
            if rule.priority > MAX_RULE_PRIORITY:
                raise ConfigError(f"rule sid {rule.sid}: priority above {MAX_RULE_PRIORITY}")
            if rule.action is Action.MIH and not self.decoys_of(DecoyClass.MIH):
                raise ConfigError(f"rule sid {rule.sid} needs an MIH but the scenario has none")
            if rule.action is Action.HIH and not self.decoys_of(DecoyClass.HIH):
                raise ConfigError(f"rule sid {rule.sid} needs an HIH but the scenario has none")
        if self.mechanism is Mechanism.M2:
            if self.frontend not in self.sites:
                raise ConfigError(f"mechanism m2 needs a frontend decoy, got {self.frontend!r}")
        if self.mechanism is Mechanism.DIRECT and self.direct_target not in self.sites:
            raise ConfigError(f"direct forwarding target {self.direct_target!r} unknown")
        for name, site in self.sites.items():
            replayable = (self.mechanism is Mechanism.M1
                          or (self.mechanism is Mechanism.M2 and name != self.frontend))
            if replayable and site.spf is None and self.rules:
                raise ConfigError(f"decoy {name} may receive migrated connections "
                                  "but has no SPF in front of it")
        if self.policy is not None:
            for target in self.policy.redirect_map.values():
                if target not in self.sites:
                    raise ConfigError(f"outbound redirect target {target!r} unknown")
                if not self.sites[target].config.transparent:
                    raise ConfigError(f"outbound redirect target {target!r} must be transparent")

    def _install(self, switch, entry):
        self.sim.to_switch(self.sim.nodes[switch].flow_mod, entry)

    def _delete(self, switch, cookie):
        self.sim.to_switch(self.sim.nodes[switch].flow_delete, cookie)

    def _packet_out(self, switch, port, seg):
        self.sim.to_switch(self.sim.nodes[switch].packet_out, port, seg)

    def start(self):
        """Initial table programming, applied at time zero."""
        sim = self.sim
        fcf = sim.nodes[self.fcf]
        if self.mechanism is Mechanism.DIRECT:
            site = self.sites[self.direct_target]
            for a_port in sorted(self.attacker_ports):
                sim.at(0, fcf.flow_mod, FlowEntry(
                    PRIO_CONN, MatchFields(in_port=a_port), (Output(site.fcf_port),),
                    cookie=COOKIE_STATIC))
                sim.at(0, fcf.flow_mod, FlowEntry(
                    PRIO_CONN, MatchFields(in_port=site.fcf_port), (Output(a_port),),
                    cookie=COOKIE_STATIC))
            if site.spf:
                spf = sim.nodes[site.spf]
                sim.at(0, spf.flow_mod, FlowEntry(PRIO_CONN, MatchFields(in_port=site.spf_up),
                                                  (Output(site.spf_down),), cookie=COOKIE_STATIC))
                sim.at(0, spf.flow_mod, FlowEntry(PRIO_CONN, MatchFields(in_port=site.spf_down),
                                                  (Output(site.spf_up),), cookie=COOKIE_STATIC))
            return
        for entry in translate_rules(self.rules).dataplane_entries:
            sim.at(0, fcf.flow_mod, entry)
        if self.policy is not None:
            for name in sorted(self.sites, key=lambda n: self.sites[n].fcf_port):
                sim.at(0, fcf.flow_mod, FlowEntry(
                    PRIO_OUTBOUND, MatchFields(in_port=self.sites[name].fcf_port),
                    (ToController(),), cookie=COOKIE_OUTBOUND))

    # -- helpers ---------------------------------------------------------------

    def _event(self, kind, location="controller", **detail):
        self.sim.trace.record(self.sim.now, kind, location, **detail)

    def _new_isn(self):
        if self.forced_isn is not None:
            return self.forced_isn
        return self.rng.getrandbits(32)

    def select(self, cls: DecoyClass) -> str:
        """Round-robin over decoys of one class, in declaration order."""
        names = self.decoys_of(cls)
        name = names[self._rr[cls] % len(names)]
        self._rr[cls] += 1
        return name

    def _set_phase(self, rec, phase):
        rec.advance(phase)
        self._event(Kind.DECISION, event="phase", conn=_conn_label(rec.key), phase=phase.name)

    def _attacker_node(self, rec):
        return self.attacker_ports.get(rec.attacker_port, "attacker")

    # -- PacketIn dispatch -----------------------------------------------------

    def on_packet_in(self, switch, seg: Segment, in_port):
        if switch == self.fcf:
            if in_port in self._decoy_ports:
                self._from_decoy(self._decoy_ports[in_port], seg, in_port)
            else:
                self._from_attacker(seg, in_port)
        elif switch in self._spf_down:
            self._from_decoy(self._spf_down[switch], seg, in_port, via_spf=True)

    def _from_attacker(self, seg, in_port):
        if seg.proto == Proto.UDP:
            self._udp_from_attacker(seg, in_port)
            return
        key = seg.five_tuple
        rec = self.records.get(key)
        is_syn = seg.flags & Flag.SYN and not seg.flags & Flag.ACK
        if is_syn and (rec is None or rec.phase is Phase.TERMINATED and seg.seq != rec.attacker_isn):
            if self.mechanism is Mechanism.M1:
                self.m1_on_syn(seg, in_port)
            else:
                self.m2_on_syn(seg, in_port)
            return
        if rec is None or rec.phase is Phase.TERMINATED:
            return
        if is_syn:
            if rec.phase is Phase.P1:
                if self.mechanism is Mechanism.M1:
                    self._m1_synack(rec, seg)
                elif rec.decision is None:
                    self._packet_out(self.fcf, self.sites[rec.frontend].fcf_port, seg)
            return

        if rec.phase is Phase.P1:
            if seg.payload and rec.decision is None:
                if rec.classifying:
                    rec.absorbed += 1
                    return
                if seg.seq != seq_add(rec.attacker_isn, 1):
                    return
                rec.classifying = True
                alert = self._classify_once(rec, seg)
                self.sim.schedule(self.decision_delay_us, self._decide, rec, seg, alert)
                return
            if seg.flags & Flag.RST:
                self._terminate(rec, "attacker-reset")
                if self.mechanism is Mechanism.M2 and rec.decision is None:
                    self._packet_out(self.fcf, self.sites[rec.frontend].fcf_port, seg)
                return
            if self.mechanism is Mechanism.M2 and not rec.classifying:
                # handshake completion and control segments still belong to the frontend
                self._packet_out(self.fcf, self.sites[rec.frontend].fcf_port, seg)
            elif rec.decision is not None and rec.decision.kind == "forward":
                self._packet_out(self.fcf, self.sites[rec.target].fcf_port, seg)
            return

        if rec.phase is Phase.P2:
            rec.absorbed += 1
            return

        # P3: a segment that raced the FCF entry installation
        if seg.payload and rec.stored_end is not None and \
                seq_diff(seq_add(seg.seq, len(seg.payload)), rec.stored_end) <= 0:
            rec.absorbed += 1
            return
        self._packet_out(self.fcf, self.sites[rec.target].fcf_port, seg)

    def _classify_once(self, rec, seg):
        count = self.classify_counts.get(rec.key, 0) + 1
        self.classify_counts[rec.key] = count
        alert = self.classifier.classify(seg)
        if alert is None:
            self._event(Kind.ALERT, conn=_conn_label(rec.key), action="NOMATCH")
        else:
            self._event(Kind.ALERT, conn=_conn_label(rec.key), action=alert.action.value,
                        sid=alert.sid if alert.sid is not None else "-",
                        priority=alert.matched_rule_priority)
        return alert

    # -- decision engine ---------------------------------------------------------

    def decision_for(self, alert) -> Decision:
        if alert is None or alert.action is Action.DROP:
            return DROP
        if alert.action is Action.MIH:
            return Decision("forward", self.select(DecoyClass.MIH))
        return Decision("redirect", self.select(DecoyClass.HIH))

    def on_first_payload(self, seg, rec) -> Decision:
        """Classify once and map the alert to a decision (no side effects on
        the data plane)."""
        if rec.decision is not None:
            return rec.decision
        alert = self._classify_once(rec, seg)
        rec.decision = self.decision_for(alert)
        return rec.decision

    def _decide(self, rec, seg, alert):
        if rec.phase is Phase.TERMINATED:
            return
        decision = self.decision_for(alert)
        rec.decision = decision
        rec.classifying = False
        migrate = decision.kind != "drop" and (
            self.mechanism is Mechanism.M1 or decision.decoy != rec.frontend)
        self._event(Kind.DECISION, event="decision", conn=_conn_label(rec.key),
                    decision=decision.kind, target=decision.decoy or "-",
                    mechanism=self.mechanism.name,
                    frontend=rec.frontend or "controller",
                    attacker=self._attacker_node(rec),
                    migrate="yes" if migrate else "no")
        if decision.kind == "drop":
            self._terminate(rec, "dropped")
            if self.mechanism is Mechanism.M2:
                self.teardown_old_connection(rec)
            return
        if not migrate:
            self._pin_to_frontend(rec, seg)
            return
        self.replay_handshake(rec, decision.decoy, seg)

    def _terminate(self, rec, reason):
        if rec.phase is not Phase.TERMINATED:
            self._set_phase(rec, Phase.TERMINATED)
            self._event(Kind.TERMINATED, conn=_conn_label(rec.key), reason=reason)
        if rec.tap_cookie:
            site = self.sites.get(rec.target) if rec.target else None
            if site is not None and site.spf:
                self._delete(site.spf, rec.tap_cookie)
            if self.mechanism is Mechanism.M2:
                self._delete(self.fcf, rec.tap_cookie)
            rec.tap_cookie = 0

    # -- mechanism 1 -------------------------------------------------------------

    def m1_on_syn(self, seg: Segment, in_port):
        """Answer a SYN on behalf of the decoy; closed ports stay silent."""
        if seg.dst_port not in self._open_ports.get(seg.dst_ip, ()):
            return []
        rec = ConnectionRecord(seg.five_tuple, Mechanism.M1, seg.seq, in_port, seg.src_mac,
                               frontend_isn=self._new_isn(), cookie=next(self._cookies))
        self.records[rec.key] = rec
        rec.history.append(Phase.P1)
        self._event(Kind.DECISION, event="phase", conn=_conn_label(rec.key), phase="P1")
        return [self._m1_synack(rec, seg)]

    def _m1_synack(self, rec, seg):
        mac = self._advertised.get(seg.dst_ip, seg.dst_mac)
        out = Segment(mac, seg.src_mac, seg.dst_ip, seg.src_ip, Proto.TCP, seg.dst_port,
                      seg.src_port, Flag.SYN | Flag.ACK, rec.frontend_isn,
                      seq_add(rec.attacker_isn, 1))
        self._packet_out(self.fcf, rec.attacker_port, out)
        return out

    # -- mechanism 2 -------------------------------------------------------------

    def m2_on_syn(self, seg: Segment, in_port):
        rec = ConnectionRecord(seg.five_tuple, Mechanism.M2, seg.seq, in_port, seg.src_mac,
                               frontend=self.frontend, cookie=next(self._cookies),
                               tap_cookie=next(self._cookies))
        self.records[rec.key] = rec
        rec.history.append(Phase.P1)
        self._event(Kind.DECISION, event="phase", conn=_conn_label(rec.key), phase="P1")
        site = self.sites[self.frontend]
        self._install(self.fcf, FlowEntry(
            PRIO_TAP, MatchFields.for_tuple(rec.key.reversed(), in_port=site.fcf_port),
            (ToController(),), cookie=rec.tap_cookie))
        self._packet_out(self.fcf, site.fcf_port, seg)

    def m2_on_packet_in(self, seg: Segment, in_port, rec: ConnectionRecord):
        """Frontend-originated segment seen through the FCF tap."""
        if rec.phase is Phase.P1 and rec.decision is None:
            if seg.flags & Flag.SYN and seg.flags & Flag.ACK:
                rec.frontend_isn = seg.seq
            if seg.flags & Flag.RST:
                self._terminate(rec, "frontend-reset")
                rec.frontend_closed = True
            self._packet_out(self.fcf, rec.attacker_port, seg)
            return
        if rec.phase is Phase.P1 and rec.decision is not None and rec.decision.kind == "forward":
            self._packet_out(self.fcf, rec.attacker_port, seg)
            return
        # the frontend no longer owns this connection
        rec.dropped_frontend += 1
        self._event(Kind.DECISION, event="drop-frontend", conn=_conn_label(rec.key),
                    flags=format_flags(seg.flags))

    def _pin_to_frontend(self, rec, seg):
        site = self.sites[rec.decision.decoy]
        rec.target = rec.decision.decoy
        self._delete(self.fcf, rec.tap_cookie)
        self._install(self.fcf, FlowEntry(
            PRIO_CONN, MatchFields.for_tuple(rec.key, in_port=rec.attacker_port),
            (Output(site.fcf_port),), cookie=rec.cookie, idle_timeout=self.idle_us))
        self._install(self.fcf, FlowEntry(
            PRIO_CONN, MatchFields.for_tuple(rec.key.reversed(), in_port=site.fcf_port),
            (Output(rec.attacker_port),), cookie=rec.cookie, idle_timeout=self.idle_us))
        self._packet_out(self.fcf, site.fcf_port, seg)

    # -- redirection engine --------------------------------------------------------

    def replay_handshake(self, rec: ConnectionRecord, target: str, seg: Segment):
        """Phase 2: open a fresh connection to ``target`` that reuses the
        attacker's ISN, then hand the stored first payload over."""
        site = self.sites[target]
        rec.target = target
        rec.stored_payload = seg
        rec.stored_end = seq_add(seg.seq, len(seg.payload))
        self._set_phase(rec, Phase.P2)
        if not rec.tap_cookie:
            rec.tap_cookie = next(self._cookies)
        cfg = site.config
        syn = Segment(rec.attacker_mac, cfg.mac, rec.key.src_ip, rec.key.dst_ip, Proto.TCP,
                      rec.key.src_port, rec.key.dst_port, Flag.SYN, rec.attacker_isn, 0)
        self._install(site.spf, FlowEntry(
            PRIO_TAP, MatchFields.for_tuple(rec.key.reversed(), in_port=site.spf_down),
            (ToController(),), cookie=rec.tap_cookie))
        self._packet_out(site.spf, site.spf_down, syn)
        self.sim.schedule(self.handshake_timeout_us, self._handshake_timeout, rec)

    def _handshake_timeout(self, rec):
        if rec.phase is Phase.P2 and rec.backend_isn is None:
            site = self.sites[rec.target]
            self._delete(site.spf, rec.tap_cookie)
            rec.stored_payload = None
            self._set_phase(rec, Phase.TERMINATED)
            self._event(Kind.TERMINATED, conn=_conn_label(rec.key), reason="handshake-timeout",
                        target=rec.target)
            if self.mechanism is Mechanism.M2:
                self.teardown_old_connection(rec)

    def _backend_synack(self, rec, seg):
        site = self.sites[rec.target]
        rec.backend_isn = seg.seq
        if rec.frontend_isn is None:
            # frontend never answered (only possible with a misbehaving frontend)
            rec.frontend_isn = rec.backend_isn
        rec.ack_diff, rec.seq_diff = compute_diffs(rec.frontend_isn, rec.backend_isn)
        key = rec.key
        self._delete(site.spf, rec.tap_cookie)
        self._install(site.spf, FlowEntry(
            PRIO_CONN, MatchFields.for_tuple(key, in_port=site.spf_up),
            (SetTcpAckDiff(rec.ack_diff), Output(site.spf_down)),
            cookie=rec.cookie, idle_timeout=self.idle_us))
        self._install(site.spf, FlowEntry(
            PRIO_CONN, MatchFields.for_tuple(key.reversed(), in_port=site.spf_down),
            (SetTcpSeqDiff(rec.seq_diff), Output(site.spf_up)),
            cookie=rec.cookie, idle_timeout=self.idle_us))
        ack = Segment(rec.attacker_mac, site.config.mac, key.src_ip, key.dst_ip, Proto.TCP,
                      key.src_port, key.dst_port, Flag.ACK, seq_add(rec.attacker_isn, 1),
                      seq_add(rec.backend_isn, 1))
        self._packet_out(site.spf, site.spf_down, ack)
        if self.mechanism is Mechanism.M2:
            self._delete(self.fcf, rec.tap_cookie)
        self._install(self.fcf, FlowEntry(
            PRIO_CONN, MatchFields.for_tuple(key, in_port=rec.attacker_port),
            (Output(site.fcf_port),), cookie=rec.cookie, idle_timeout=self.idle_us))
        self._install(self.fcf, FlowEntry(
            PRIO_CONN, MatchFields.for_tuple(key.reversed(), in_port=site.fcf_port),
            (Output(rec.attacker_port),), cookie=rec.cookie, idle_timeout=self.idle_us))
        # original numbers: the SPF applies the ACK diff on the way through
        self._packet_out(self.fcf, site.fcf_port, rec.stored_payload)
        self._event(Kind.DECISION, event="sync", conn=_conn_label(key), target=rec.target,
                    ack_diff=rec.ack_diff, seq_diff=rec.seq_diff)
        self._set_phase(rec, Phase.P3)
        self.teardown_old_connection(rec)

    def teardown_old_connection(self, rec: ConnectionRecord):
        """Release the original endpoint once the backend owns the session."""
        if rec.frontend_closed:
            return
        rec.frontend_closed = True
        if rec.mechanism is Mechanism.M1:
            self._event(Kind.TERMINATED, conn=_conn_label(rec.key), reason="controller-released")
            return
        site = self.sites[rec.frontend]
        rst = Segment(rec.attacker_mac, site.config.mac, rec.key.src_ip, rec.key.dst_ip,
                      Proto.TCP, rec.key.src_port, rec.key.dst_port, Flag.RST,
                      seq_add(rec.attacker_isn, 1), 0)
        self._packet_out(self.fcf, site.fcf_port, rst)
        self._event(Kind.TERMINATED, location=rec.frontend, conn=_conn_label(rec.key),
                    reason="migrated" if rec.phase is Phase.P3 else "closed")

    def _from_decoy(self, decoy, seg, in_port, via_spf=False):
        rec = self.records.get(seg.five_tuple.reversed()) if seg.proto == Proto.TCP else None
        if rec is not None and rec.phase is not Phase.TERMINATED:
            if via_spf:
                if (rec.phase is Phase.P2 and decoy == rec.target and seg.flags & Flag.SYN
                        and seg.flags & Flag.ACK and seg.ack == seq_add(rec.attacker_isn, 1)):
                    self._backend_synack(rec, seg)
                return
            if decoy == rec.frontend:
                self.m2_on_packet_in(seg, in_port, rec)
                return
            if rec.phase is Phase.P3 and decoy == rec.target:
                self._packet_out(self.fcf, rec.attacker_port, seg)
            return
        if rec is not None:
            if decoy == rec.frontend and rec.mechanism is Mechanism.M2:
                rec.dropped_frontend += 1
            return
        if not via_spf:
            self.outbound_control(seg, decoy, in_port)

    # -- outbound ------------------------------------------------------------------

    def outbound_control(self, seg: Segment, decoy: str, in_port) -> Decision:
        """Containment for connections a decoy opens on its own."""
        if self.policy is None:
            return DROP
        new_flow = seg.proto == Proto.UDP or (seg.flags & Flag.SYN and not seg.flags & Flag.ACK)
        if not new_flow:
            return DROP
        target = self.policy.redirect_map.get((seg.dst_ip, seg.dst_port))
        label = _conn_label(seg.five_tuple)
        if target is not None:
            decision = Decision("redirect", target)
            out_port = self.sites[target].fcf_port
        elif self.policy.default == "allow":
            decision = Decision("forward", "external")
            out_port = min(self.attacker_ports) if self.attacker_ports else None
        else:
            decision = DROP
            out_port = None
        self.outbound_log.append((self.sim.now, decoy, label, str(decision)))
        self._event(Kind.DECISION, event="outbound", conn=label, source=decoy,
                    decision=decision.kind, target=decision.decoy or "-")
        if out_port is None:
            return decision
        cookie = next(self._cookies)
        ft = seg.five_tuple
        self._install(self.fcf, FlowEntry(PRIO_CONN, MatchFields.for_tuple(ft, in_port=in_port),
                                          (Output(out_port),), cookie=cookie,
                                          idle_timeout=self.idle_us))
        self._install(self.fcf, FlowEntry(PRIO_CONN,
                                          MatchFields.for_tuple(ft.reversed(), in_port=out_port),
                                          (Output(in_port),), cookie=cookie,
                                          idle_timeout=self.idle_us))
        site = self.sites.get(target) if target is not None else None
        if site is not None and site.spf:
            self._install(site.spf, FlowEntry(
                PRIO_CONN, MatchFields.for_tuple(ft, in_port=site.spf_up),
                (Output(site.spf_down),), cookie=cookie, idle_timeout=self.idle_us))
            self._install(site.spf, FlowEntry(
                PRIO_CONN, MatchFields.for_tuple(ft.reversed(), in_port=site.spf_down),
                (Output(site.spf_up),), cookie=cookie, idle_timeout=self.idle_us))
        self._packet_out(self.fcf, out_port, seg)
        return decision

    # -- UDP -----------------------------------------------------------------------

    def _udp_from_attacker(self, seg, in_port):
        key = seg.five_tuple
        if key in self.udp_flows:
            return
        count = self.classify_counts.get(key, 0) + 1
        self.classify_counts[key] = count
        alert = self.classifier.classify(seg)
        decision = self.decision_for(alert)
        self.udp_flows[key] = decision
        self._event(Kind.DECISION, event="decision", conn=_conn_label(key),
                    decision=decision.kind, target=decision.decoy or "-",
                    mechanism=self.mechanism.name, frontend="-", attacker="-", migrate="no")
        if decision.kind == "drop":
            return
        site = self.sites[decision.decoy]
        cookie = next(self._cookies)
        actions = (Output(site.fcf_port),)
        if site.config.ip != seg.dst_ip and not site.config.transparent:
            actions = (RewriteDst(site.config.ip, site.config.mac), Output(site.fcf_port))
        self._install(self.fcf, FlowEntry(PRIO_CONN, MatchFields.for_tuple(key, in_port=in_port),
                                          actions, cookie=cookie, idle_timeout=self.idle_us))
        self._install(self.fcf, FlowEntry(
            PRIO_CONN, MatchFields(in_port=site.fcf_port, proto=Proto.UDP, src_port=key.dst_port,
                                   dst_ip=key.src_ip, dst_port=key.src_port),
            (Output(in_port),), cookie=cookie, idle_timeout=self.idle_us))
        if site.spf:
            spf = site.spf
            self._install(spf, FlowEntry(PRIO_CONN, MatchFields.for_tuple(key, in_port=site.spf_up),
                                         (Output(site.spf_down),), cookie=cookie))
            self._install(spf, FlowEntry(
                PRIO_CONN, MatchFields(in_port=site.spf_down, proto=Proto.UDP,
                                       dst_ip=key.src_ip, dst_port=key.src_port),
                (Output(site.spf_up),), cookie=cookie))
        out = seg
        if len(actions) == 2:
            out = Segment(seg.src_mac, site.config.mac, seg.src_ip, site.config.ip, seg.proto,
                          seg.src_port, seg.dst_port, payload=seg.payload)
        self._packet_out(self.fcf, site.fcf_port, out)


def init_controller(sim, ruleset, sites, **kwargs) -> Controller:
    """Build the controller, validate it against the scenario and program
    the FCF with the translated rules."""
    ctl = Controller(sim, rules=ruleset, sites=sites, **kwargs)
    sim.controller = ctl
    ctl.start()
    return ctl


__all__ = [
    "ConfigError",
    "ConnectionRecord",
    "Controller",
    "Decision",
    "DecoySite",
    "Mechanism",
    "OutboundPolicy",
    "Phase",
    "compute_diffs",
    "init_controller",
]
