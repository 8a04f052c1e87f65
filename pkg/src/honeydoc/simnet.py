"""Deterministic discrete-event network engine.

Time is integer microseconds. Links are lossless FIFO with a fixed
latency; the controller is reached over a separate channel with its own
latency plus a fixed processing cost per PacketIn.
"""

from __future__ import annotations

import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field

from honeydoc import kernels
from honeydoc.core import (
    MOD32,
    Flag,
    IpAddr,
    Kind,
    MacAddr,
    Proto,
    Segment,
    Trace,
    seq_add,
    split_payload,
)

MS = 1000


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    a: str
    a_port: int
    b: str
    b_port: int
    latency_us: int = MS


@dataclass
class Topology:
    nodes: dict = field(default_factory=dict)  # name -> role string
    links: list = field(default_factory=list)
    controller_channel_latency_us: int = 5 * MS
    controller_processing_us: int = 2 * MS

    def add_node(self, name, role):
        if name in self.nodes:
            raise TopologyError(f"duplicate node {name!r}")
        self.nodes[name] = role

    def connect(self, a, a_port, b, b_port, latency_us=MS):
        self.links.append(Link(a, a_port, b, b_port, latency_us))

    def port_map(self):
        """``{(node, port): (peer, peer_port, latency_us)}``; validates the wiring."""
        ports = {}
        for link in self.links:
            for node in (link.a, link.b):
                if node not in self.nodes:
                    raise TopologyError(f"link references unknown node {node!r}")
            if link.latency_us < 0:
                raise TopologyError("negative link latency")
            for end, peer in (((link.a, link.a_port), (link.b, link.b_port)),
                              ((link.b, link.b_port), (link.a, link.a_port))):
                if end in ports:
                    raise TopologyError(f"port conflict on {end[0]}:{end[1]}")
                ports[end] = (*peer, link.latency_us)
        return ports

    def validate(self):
        ports = self.port_map()
        adj = {n: set() for n in self.nodes}
        for link in self.links:
            adj[link.a].add(link.b)
            adj[link.b].add(link.a)
        attackers = [n for n, r in self.nodes.items() if r == "attacker"]
        decoys = {n for n, r in self.nodes.items() if r == "decoy"}
        for start in attackers:
            seen = {start}
            todo = deque([start])
            while todo:
                n = todo.popleft()
                for m in adj[n]:
                    if m not in seen:
                        seen.add(m)
                        todo.append(m)
            if not seen & decoys:
                raise TopologyError(f"attacker {start!r} cannot reach any decoy")
            if not any(self.nodes[n] == "FCF" for n in seen):
                raise TopologyError(f"attacker {start!r} has no path through an FCF")
        return ports


class Simulator:
    """Event loop. Events run in (time, insertion order)."""

    def __init__(self, topology: Topology, horizon_us=None):
        self.topology = topology
        self.ports = topology.validate()
        self.nodes = {}
        self.controller = None
        self.trace = Trace()
        self.now = 0
        self.horizon_us = horizon_us
        self._queue = []
        self._counter = itertools.count()

    def attach(self, name, node):
        if name not in self.topology.nodes:
            raise TopologyError(f"node {name!r} not in topology")
        self.nodes[name] = node

    def schedule(self, delay_us, fn, *args):
        if delay_us < 0:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._queue, (self.now + delay_us, next(self._counter), fn, args))

    def at(self, time_us, fn, *args):
        heapq.heappush(self._queue, (time_us, next(self._counter), fn, args))

    def send(self, node, port, seg: Segment):
        peer = self.ports.get((node, port))
        if peer is None:
            return  # unconnected port: frame is lost
        peer_node, peer_port, latency = peer
        self.schedule(latency, self._deliver, node, peer_node, peer_port, seg)

    def _deliver(self, sender, receiver, port, seg):
        self.trace.record_frame(self.now, f"{sender}>{receiver}", seg)
        self.nodes[receiver].receive(port, seg)

    # controller channel ----------------------------------------------------

    def packet_in(self, switch, seg, in_port):
        t = self.topology
        self.schedule(t.controller_channel_latency_us + t.controller_processing_us,
                      self.controller.on_packet_in, switch, seg, in_port)

    def to_switch(self, fn, *args):
        self.schedule(self.topology.controller_channel_latency_us, fn, *args)

    # running -----------------------------------------------------------------

    def run(self):
        q = self._queue
        horizon = self.horizon_us
        while q:
            time, _, fn, args = q[0]
            if horizon is not None and time >= horizon:
                break
            heapq.heappop(q)
            self.now = time
            fn(*args)
        return self.trace


class SwitchAdapter:
    """Binds a dataplane SwitchNode into the simulator."""

    def __init__(self, sim: Simulator, switch):
        self.sim = sim
        self.switch = switch
        self.name = switch.name

    def receive(self, port, seg):
        from honeydoc.dataplane import Disposition
        out = self.switch.process(seg, port, self.sim.now)
        if out.disposition is Disposition.EMIT:
            self.sim.send(self.name, out.port, out.segment)
        elif out.disposition is Disposition.CONTROLLER:
            self.sim.packet_in(self.name, out.segment, port)

    # controller-side operations, already delayed by the channel
    def flow_mod(self, entry):
        self.switch.install(entry, self.sim.now)
        self.sim.trace.record(self.sim.now, Kind.FLOW, self.name, priority=entry.priority,
                              cookie=f"{entry.cookie:#x}", entry=entry.describe())

    def flow_delete(self, cookie):
        self.switch.remove_cookie(cookie)

    def packet_out(self, port, seg):
        self.sim.send(self.name, port, seg)


class DecoyAdapter:
    def __init__(self, sim: Simulator, decoy):
        self.sim = sim
        self.decoy = decoy
        self.name = decoy.name

    def receive(self, port, seg):
        sim = self.sim
        n_closed = len(self.decoy.closed)
        responses, logs = self.decoy.on_segment(seg, sim.now)
        for entry in logs:
            sim.trace.record(sim.now, Kind.DECOY_LOG, self.name, remote=entry.remote,
                             stage=entry.stage, bytes=entry.byte_count,
                             message=entry.message.hex())
        for _, remote, reason in self.decoy.closed[n_closed:]:
            sim.trace.record(sim.now, Kind.TERMINATED, self.name, remote=remote, reason=reason)
        for delay, out in responses:
            sim.schedule(delay, sim.send, self.name, port, out)


# ---------------------------------------------------------------------------
# attacker

@dataclass(frozen=True)
class ConnectionPlan:
    start_us: int
    src_ip: IpAddr
    src_port: int
    dst_ip: IpAddr
    dst_port: int
    script: tuple  # payload turns (bytes)
    isn: int | None = None


@dataclass
class AttackerModel:
    name: str
    ip: IpAddr
    mac: MacAddr
    target_ip: IpAddr | None = None
    target_port: int | None = None
    script: tuple = ()
    retransmit_initial_ms: int = 200
    retransmit_backoff_factor: float = 2.0
    max_retries: int = 3
    connection_rate_per_s: float = 1.0
    connections: int = 1
    src_port: int = 40000
    start_ms: int = 0
    switch_port: int = 1
    isn: int | None = None
    plans: tuple = ()  # explicit connection list overrides the generated one

    def __post_init__(self):
        if self.connection_rate_per_s <= 0:
            raise ValueError(f"{self.name}: connection rate must be positive")
        if self.max_retries < 0:
            raise ValueError(f"{self.name}: max_retries must be >= 0")
        if self.retransmit_initial_ms <= 0:
            raise ValueError(f"{self.name}: retransmit_initial_ms must be positive")
        self.script = tuple(self.script)

    def plan(self):
        if self.plans:
            return list(self.plans)
        if self.target_ip is None:
            return []
        gap = 1_000_000 / self.connection_rate_per_s
        return [ConnectionPlan(self.start_ms * MS + round(i * gap), self.ip,
                               (self.src_port + i - 1024) % 64512 + 1024,
                               self.target_ip, self.target_port, self.script, self.isn)
                for i in range(self.connections)]


class _AState:
    SYN_SENT = "SYN_SENT"
    ESTABLISHED = "ESTABLISHED"
    CLOSED = "CLOSED"
    ABANDONED = "ABANDONED"


@dataclass
class AttackerConn:
    plan: ConnectionPlan
    isn: int
    state: str = _AState.SYN_SENT
    snd_nxt: int = 0
    snd_una: int = 0
    rcv_nxt: int | None = None
    turn: int = 0
    fin_sent: bool = False
    fin_received: bool = False
    outstanding: list = field(default_factory=list)  # unacked segments
    first_send: int = 0
    retries: int = 0
    timer_token: int = 0
    sent: bytearray = field(default_factory=bytearray)
    received: bytearray = field(default_factory=bytearray)
    payload_sends: int = 0
    peer_mac: MacAddr | None = None


def _after(a, b):
    """True when sequence number ``a`` is strictly after ``b`` (mod 2**32)."""
    return 0 < (a - b) % MOD32 < 1 << 31


class AttackerHost:
    """Client model: connects, runs its payload turns, retransmits on a
    fixed schedule measured from the first send, then closes with FIN.

    The first retransmission waits ``initial`` after the original send;
    each later gap is the previous one times ``backoff``, except that the
    second gap repeats the first. With backoff 2 that gives offsets
    initial, 2*initial, 4*initial.
    """

    def __init__(self, sim: Simulator, model: AttackerModel, seed=0, arp=None):
        self.sim = sim
        self.model = model
        self.name = model.name
        self.rng = random.Random(f"{seed}/attacker/{model.name}")
        self.conns: dict = {}
        self.arp = arp or {}  # ip -> advertised MAC
        self.abandoned = 0

    def start(self):
        for plan in self.model.plan():
            self.sim.at(plan.start_us, self._open, plan)

    def _key(self, local_ip, local_port, remote_ip, remote_port):
        return (local_ip, local_port, remote_ip, remote_port)

    def _open(self, plan):
        isn = plan.isn if plan.isn is not None else self.rng.getrandbits(32)
        conn = AttackerConn(plan, isn, snd_nxt=seq_add(isn, 1), snd_una=isn)
        self.conns[self._key(plan.src_ip, plan.src_port, plan.dst_ip, plan.dst_port)] = conn
        syn = self._segment(conn, Flag.SYN, isn, 0)
        self._transmit(conn, [syn])

    def _segment(self, conn, flags, seq, ack, payload=b""):
        p = conn.plan
        dst_mac = conn.peer_mac or self.arp.get(p.dst_ip) or MacAddr(0xFFFFFFFFFFFF)
        return Segment(self.model.mac, dst_mac, p.src_ip, p.dst_ip, Proto.TCP,
                       p.src_port, p.dst_port, flags, seq, ack, payload)

    def _emit(self, seg):
        self.sim.send(self.name, self.model.switch_port, seg)

    def _transmit(self, conn, segs):
        """Send new retransmittable segments and arm the timer."""
        for seg in segs:
            self._emit(seg)
            if seg.payload:
                conn.payload_sends += 1
        conn.outstanding = list(segs)
        conn.first_send = self.sim.now
        conn.retries = 0
        self._arm(conn)

    def _arm(self, conn):
        conn.timer_token += 1
        m = self.model
        b = m.retransmit_backoff_factor
        delay = round(m.retransmit_initial_ms * MS * (1 + sum(b ** j for j in range(conn.retries))))
        self.sim.at(conn.first_send + delay, self._timeout, conn, conn.timer_token)

    def _timeout(self, conn, token):
        if token != conn.timer_token or not conn.outstanding:
            return
        if conn.state in (_AState.CLOSED, _AState.ABANDONED):
            return
        if conn.retries >= self.model.max_retries:
            conn.state = _AState.ABANDONED
            conn.outstanding = []
            self.abandoned += 1
            p = conn.plan
            self.sim.trace.record(self.sim.now, Kind.TERMINATED, self.name,
                                  conn=f"{p.src_ip}:{p.src_port}>{p.dst_ip}:{p.dst_port}",
                                  reason="abandoned")
            return
        conn.retries += 1
        for seg in conn.outstanding:
            if conn.rcv_nxt is not None and seg.flags & Flag.ACK:
                seg = Segment(seg.src_mac, seg.dst_mac, seg.src_ip, seg.dst_ip, seg.proto,
                              seg.src_port, seg.dst_port, seg.flags, seg.seq, conn.rcv_nxt,
                              seg.payload)
            self._emit(seg)
            if seg.payload:
                conn.payload_sends += 1
        self._arm(conn)

    def receive(self, port, seg):
        if seg.proto != Proto.TCP:
            return
        conn = self.conns.get(self._key(seg.dst_ip, seg.dst_port, seg.src_ip, seg.src_port))
        if conn is None or conn.state in (_AState.CLOSED, _AState.ABANDONED):
            return
        if seg.flags & Flag.RST:
            conn.state = _AState.CLOSED
            conn.outstanding = []
            conn.timer_token += 1
            p = conn.plan
            self.sim.trace.record(self.sim.now, Kind.TERMINATED, self.name,
                                  conn=f"{p.src_ip}:{p.src_port}>{p.dst_ip}:{p.dst_port}",
                                  reason="reset")
            return

        if conn.state == _AState.SYN_SENT:
            if seg.flags & Flag.SYN and seg.flags & Flag.ACK and seg.ack == seq_add(conn.isn, 1):
                conn.state = _AState.ESTABLISHED
                conn.peer_mac = seg.src_mac
                conn.rcv_nxt = seq_add(seg.seq, 1)
                conn.snd_una = conn.snd_nxt
                conn.outstanding = []
                conn.timer_token += 1
                self._emit(self._segment(conn, Flag.ACK, conn.snd_nxt, conn.rcv_nxt))
                self._advance(conn, need_ack=False)
            return

        if seg.flags & Flag.SYN:
            # retransmitted SYN/ACK: our ACK was lost or late
            self._emit(self._segment(conn, Flag.ACK, conn.snd_nxt, conn.rcv_nxt))
            return

        need_ack = False
        if seg.flags & Flag.ACK and _after(seg.ack, conn.snd_una) \
                and not _after(seg.ack, conn.snd_nxt):
            conn.snd_una = seg.ack
            conn.outstanding = [s for s in conn.outstanding
                                if _after(seq_add(s.seq, s.seq_len()), conn.snd_una)]
            if not conn.outstanding:
                conn.timer_token += 1
        if seg.payload:
            if seg.seq == conn.rcv_nxt:
                conn.received += seg.payload
                conn.rcv_nxt = seq_add(conn.rcv_nxt, len(seg.payload))
            need_ack = True
        if seg.flags & Flag.FIN and seq_add(seg.seq, len(seg.payload)) == conn.rcv_nxt:
            conn.rcv_nxt = seq_add(conn.rcv_nxt, 1)
            conn.fin_received = True
            need_ack = True
        self._advance(conn, need_ack)

    def _advance(self, conn, need_ack):
        """Send the next turn, FIN or a bare ACK as the state allows."""
        script = conn.plan.script
        if conn.snd_una == conn.snd_nxt and not conn.fin_sent:
            if conn.turn < len(script):
                data = script[conn.turn]
                conn.turn += 1
                segs = []
                for chunk in split_payload(data):
                    segs.append(self._segment(conn, Flag.PSH | Flag.ACK, conn.snd_nxt,
                                              conn.rcv_nxt, chunk))
                    conn.snd_nxt = seq_add(conn.snd_nxt, len(chunk))
                    conn.sent += chunk
                if segs:
                    self._transmit(conn, segs)
                    return
            if conn.turn >= len(script):
                fin = self._segment(conn, Flag.FIN | Flag.ACK, conn.snd_nxt, conn.rcv_nxt)
                conn.snd_nxt = seq_add(conn.snd_nxt, 1)
                conn.fin_sent = True
                self._transmit(conn, [fin])
                return
        if conn.fin_sent and conn.snd_una == conn.snd_nxt and conn.fin_received:
            conn.state = _AState.CLOSED
            self._emit(self._segment(conn, Flag.ACK, conn.snd_nxt, conn.rcv_nxt))
            return
        if need_ack:
            self._emit(self._segment(conn, Flag.ACK, conn.snd_nxt, conn.rcv_nxt))


def attacker_drive(sim: Simulator, model: AttackerModel, seed=0, arp=None):
    """Attach an attacker host and schedule its connections."""
    host = AttackerHost(sim, model, seed, arp)
    sim.attach(model.name, host)
    host.start()
    return host


# ---------------------------------------------------------------------------
# trace analysis

def packets_per_bin(trace, node: str, bin_ms: int) -> dict:
    """FrameDelivered counts on links touching ``node``, per ``bin_ms`` window."""
    if bin_ms <= 0:
        raise ValueError("bin_ms must be positive")
    times = [ev.time for ev in trace
             if ev.kind is Kind.FRAME and node in ev.endpoints()]
    return dict(sorted(kernels.bin_counts(times, bin_ms * MS).items()))
