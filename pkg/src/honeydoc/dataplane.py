"""Switch layer: priority flow tables with Seq/Ack diff rewriting.

Two switch roles share one implementation. The Flow Classifying Forwarder
(FCF) isolates decoys that share an IP/MAC by steering on switch ports;
a Session Processing Forwarder (SPF) sits in front of a migration target
and applies the per-direction sequence offsets.
"""

from __future__ import annotations

import bisect
import dataclasses
import enum
import itertools
import re
from dataclasses import dataclass, field

from honeydoc import kernels
from honeydoc.core import MOD32, IpAddr, MacAddr, Proto, Segment, seq_add


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class MatchFields:
    in_port: int | None = None
    proto: Proto | None = None
    src_ip: IpAddr | None = None
    dst_ip: IpAddr | None = None
    src_port: int | None = None
    dst_port: int | None = None

    @classmethod
    def for_tuple(cls, ft, in_port=None):
        return cls(in_port, ft.proto, ft.src_ip, ft.dst_ip, ft.src_port, ft.dst_port)

    def matches(self, seg: Segment, in_port) -> bool:
        return ((self.in_port is None or self.in_port == in_port)
                and (self.proto is None or self.proto == seg.proto)
                and (self.src_ip is None or self.src_ip == seg.src_ip)
                and (self.dst_ip is None or self.dst_ip == seg.dst_ip)
                and (self.src_port is None or self.src_port == seg.src_port)
                and (self.dst_port is None or self.dst_port == seg.dst_port))

    def packed(self):
        mask = 0
        vals = []
        for bit, value in enumerate((self.in_port, self.proto, self.src_ip, self.dst_ip,
                                     self.src_port, self.dst_port)):
            if value is None:
                vals.append(0)
                continue
            mask |= 1 << bit
            vals.append(value.value if isinstance(value, IpAddr) else int(value))
        return (mask, *vals)

    def __str__(self):
        parts = []
        if self.proto is not None:
            parts.append(self.proto.name.lower())
        if self.in_port is not None:
            parts.append(f"in_port={self.in_port}")
        if self.src_ip is not None:
            parts.append(f"nw_src={self.src_ip}")
        if self.dst_ip is not None:
            parts.append(f"nw_dst={self.dst_ip}")
        if self.src_port is not None:
            parts.append(f"tp_src={self.src_port}")
        if self.dst_port is not None:
            parts.append(f"tp_dst={self.dst_port}")
        return ",".join(parts)


# ---------------------------------------------------------------------------
# actions

@dataclass(frozen=True)
class Drop:
    terminal = True

    def __str__(self):
        return "drop"


@dataclass(frozen=True)
class Output:
    port: int
    terminal = True

    def __str__(self):
        return f"output:{self.port}"


@dataclass(frozen=True)
class ToController:
    terminal = True

    def __str__(self):
        return "CONTROLLER:65535"


def _check_delta(delta):
    if not isinstance(delta, int) or not -MOD32 < delta < MOD32:
        raise FlowError(f"diff out of signed 33-bit range: {delta!r}")


@dataclass(frozen=True)
class SetTcpSeqDiff:
    delta: int
    terminal = False

    def __post_init__(self):
        _check_delta(self.delta)

    def __str__(self):
        return f"set_tcp_seq_diff:{self.delta:+d}"


@dataclass(frozen=True)
class SetTcpAckDiff:
    delta: int
    terminal = False

    def __post_init__(self):
        _check_delta(self.delta)

    def __str__(self):
        return f"set_tcp_ack_diff:{self.delta:+d}"


@dataclass(frozen=True)
class RewriteDst:
    ip: IpAddr
    mac: MacAddr
    terminal = False

    def __str__(self):
        return f"mod_nw_dst:{self.ip},mod_dl_dst:{self.mac}"


class Disposition(enum.Enum):
    EMIT = "emit"
    DROPPED = "dropped"
    CONTROLLER = "controller"


@dataclass(frozen=True)
class Outcome:
    disposition: Disposition
    segment: Segment | None = None
    port: int | None = None


DROPPED = Outcome(Disposition.DROPPED)


def apply_actions(seg: Segment, actions) -> Outcome:
    """Run an action list left to right; the last action decides the fate."""
    if not actions:
        raise FlowError("empty action list")
    *rewrites, last = actions
    if not last.terminal:
        raise FlowError("action list has no terminal Drop/Output/ToController")
    changes = {}
    seq, ack = seg.seq, seg.ack
    for act in rewrites:
        if act.terminal:
            raise FlowError(f"terminal action {act} before end of list")
        if isinstance(act, SetTcpSeqDiff):
            if seg.proto != Proto.TCP:
                raise FlowError("SET_TCP_SEQ_DIFF on a non-TCP segment")
            seq = seq_add(seq, act.delta)
            changes["seq"] = seq
        elif isinstance(act, SetTcpAckDiff):
            if seg.proto != Proto.TCP:
                raise FlowError("SET_TCP_ACK_DIFF on a non-TCP segment")
            ack = seq_add(ack, act.delta)
            changes["ack"] = ack
        elif isinstance(act, RewriteDst):
            changes["dst_ip"] = act.ip
            changes["dst_mac"] = act.mac
        else:
            raise FlowError(f"unknown action {act!r}")
    if changes:
        seg = dataclasses.replace(seg, **changes)
    if isinstance(last, Drop):
        return DROPPED
    if isinstance(last, ToController):
        return Outcome(Disposition.CONTROLLER, seg)
    return Outcome(Disposition.EMIT, seg, last.port)


def validate_actions(actions, proto=None):
    if not actions:
        raise FlowError("flow entry needs at least one action")
    if not actions[-1].terminal:
        raise FlowError("action list has no terminal Drop/Output/ToController")
    if any(a.terminal for a in actions[:-1]):
        raise FlowError("terminal action before end of list")
    if proto is not None and proto != Proto.TCP:
        if any(isinstance(a, (SetTcpSeqDiff, SetTcpAckDiff)) for a in actions):
            raise FlowError("Seq/Ack diff actions need a TCP match")


# ---------------------------------------------------------------------------
# flow entries and switches

@dataclass
class FlowEntry:
    priority: int
    match: MatchFields
    actions: tuple
    cookie: int = 0
    idle_timeout: int | None = None  # microseconds
    n_packets: int = 0
    n_bytes: int = 0
    install_time: int = 0
    last_used: int = 0
    order: int = 0

    def __post_init__(self):
        self.actions = tuple(self.actions)
        validate_actions(self.actions, self.match.proto)

    def describe(self):
        acts = ",".join(str(a) for a in self.actions)
        m = str(self.match)
        return f"priority={self.priority}{',' + m if m else ''} actions={acts}"


class Role(str, enum.Enum):
    FCF = "FCF"
    SPF = "SPF"


_install_counter = itertools.count()
SWEEP_INTERVAL_US = 500_000


@dataclass
class SwitchNode:
    name: str
    role: Role = Role.FCF
    ports: dict = field(default_factory=dict)
    table: list = field(default_factory=list)

    def __post_init__(self):
        self._keys = [(-e.priority, e.order) for e in self.table]
        self._packed = None
        self.matched_packets = 0
        self._next_sweep = 0

    # table maintenance -------------------------------------------------

    def install(self, entry: FlowEntry, now: int = 0):
        validate_actions(entry.actions, entry.match.proto)
        entry.install_time = now
        entry.last_used = now
        entry.order = next(_install_counter)
        key = (-entry.priority, entry.order)
        pos = bisect.bisect_right(self._keys, key)
        self._keys.insert(pos, key)
        self.table.insert(pos, entry)
        self._packed = None
        return entry

    def remove(self, predicate):
        keep = [(k, e) for k, e in zip(self._keys, self.table) if not predicate(e)]
        removed = len(self.table) - len(keep)
        if removed:
            self._keys = [k for k, _ in keep]
            self.table = [e for _, e in keep]
            self._packed = None
        return removed

    def remove_cookie(self, cookie):
        return self.remove(lambda e: e.cookie == cookie)

    def expire(self, now: int):
        """Drop every entry whose idle timeout has run out."""
        return self.remove(lambda e: e.idle_timeout is not None
                           and now - e.last_used > e.idle_timeout)

    def _rows(self):
        if self._packed is None:
            self._packed = kernels.pack_rows([e.match.packed() for e in self.table])
        return self._packed

    # lookup --------------------------------------------------------------

    def lookup(self, seg: Segment, in_port, now: int = 0) -> FlowEntry | None:
        """Winning entry without touching counters; expires idle entries."""
        if now >= self._next_sweep:
            # an expired entry can never match again, so sweeping early
            # only keeps the table short
            self.expire(now)
            self._next_sweep = now + SWEEP_INTERVAL_US
        key = (in_port if in_port is not None else -1, int(seg.proto), seg.src_ip.value,
               seg.dst_ip.value, seg.src_port, seg.dst_port)
        while True:
            idx = kernels.match_first(self._rows(), key)
            if idx < 0:
                return None
            entry = self.table[idx]
            if entry.idle_timeout is not None and now - entry.last_used > entry.idle_timeout:
                self.remove(lambda e, entry=entry: e is entry)
                continue
            return entry

    def match(self, seg: Segment, in_port, now: int = 0) -> FlowEntry | None:
        entry = self.lookup(seg, in_port, now)
        if entry is not None:
            entry.n_packets += 1
            entry.n_bytes += len(seg.payload)
            entry.last_used = now
            self.matched_packets += 1
        return entry

    def process(self, seg: Segment, in_port, now: int = 0) -> Outcome:
        entry = self.match(seg, in_port, now)
        if entry is None:
            return DROPPED
        return apply_actions(seg, entry.actions)

    def dump(self, now: int = 0, cookie=None) -> str:
        lines = []
        for e in self.table:
            if cookie is not None and e.cookie != cookie:
                continue
            duration = max(0, now - e.install_time)
            lines.append(
                f"cookie={e.cookie:#x}, duration={duration // 1_000_000}."
                f"{duration // 1000 % 1000:03d}s, table=0, n_packets={e.n_packets}, "
                f"n_bytes={e.n_bytes}, {e.describe()}")
        return "\n".join(lines) + ("\n" if lines else "")


def install_entry(sw: SwitchNode, entry: FlowEntry, now: int = 0):
    return sw.install(entry, now)


def match_segment(sw: SwitchNode, seg: Segment, in_port, now: int = 0) -> FlowEntry | None:
    return sw.match(seg, in_port, now)


def process_ingress(sw: SwitchNode, seg: Segment, in_port, now: int = 0) -> Outcome:
    return sw.process(seg, in_port, now)


_DURATION = re.compile(r"duration=[0-9.]+s")


def normalize_dump(text: str) -> str:
    """Zero the duration fields so dumps compare across runs."""
    return _DURATION.sub("duration=0.000s", text)
