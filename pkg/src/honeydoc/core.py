"""Frames, addresses, connection identity, sequence arithmetic and traces."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import NamedTuple

from honeydoc import kernels

MOD32 = 1 << 32
MTU_PAYLOAD = 1448


class SegmentError(ValueError):
    """A segment field is out of range or violates a frame invariant."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def seq_add(base: int, delta: int) -> int:
    """``(base + delta) mod 2**32`` for a signed delta with ``|delta| < 2**32``."""
    if not -MOD32 < delta < MOD32:
        raise ValueError(f"delta out of range: {delta}")
    return kernels.seq_add(base, delta)


def seq_diff(a: int, b: int) -> int:
    """Signed offset ``d`` in ``[-2**31, 2**31)`` with ``seq_add(b, d) == a``."""
    d = (a - b) % MOD32
    return d - MOD32 if d >= 1 << 31 else d


@dataclass(frozen=True, order=True)
class MacAddr:
    value: int

    def __post_init__(self):
        if not 0 <= self.value < 1 << 48:
            raise ValueError(f"MAC out of range: {self.value}")

    @classmethod
    def parse(cls, text: str) -> MacAddr:
        parts = text.split(":")
        if len(parts) != 6 or not all(re.fullmatch(r"[0-9a-fA-F]{2}", p) for p in parts):
            raise ValueError(f"bad MAC address: {text!r}")
        return cls(int("".join(parts), 16))

    def __str__(self):
        raw = f"{self.value:012x}"
        return ":".join(raw[i:i + 2] for i in range(0, 12, 2))


@dataclass(frozen=True, order=True)
class IpAddr:
    value: int

    def __post_init__(self):
        if not 0 <= self.value < MOD32:
            raise ValueError(f"IPv4 out of range: {self.value}")

    @classmethod
    def parse(cls, text: str) -> IpAddr:
        parts = text.split(".")
        if len(parts) != 4 or not all(re.fullmatch(r"0|[1-9][0-9]{0,2}", p) for p in parts):
            raise ValueError(f"bad IPv4 address: {text!r}")
        octets = [int(p) for p in parts]
        if any(o > 255 for o in octets):
            raise ValueError(f"bad IPv4 address: {text!r}")
        return cls((octets[0] << 24) | (octets[1] << 16) | (octets[2] << 8) | octets[3])

    def __str__(self):
        v = self.value
        return f"{v >> 24 & 255}.{v >> 16 & 255}.{v >> 8 & 255}.{v & 255}"


def as_ip(value) -> IpAddr:
    return value if isinstance(value, IpAddr) else IpAddr.parse(value)


def as_mac(value) -> MacAddr:
    return value if isinstance(value, MacAddr) else MacAddr.parse(value)


class Proto(enum.IntEnum):
    TCP = 6
    UDP = 17


class Flag(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


_FLAG_ORDER = (Flag.FIN, Flag.SYN, Flag.RST, Flag.PSH, Flag.ACK)
NO_FLAGS = Flag(0)


def format_flags(flags: Flag) -> str:
    if not flags:
        return "-"
    return "|".join(f.name for f in _FLAG_ORDER if f in flags)


def parse_flags(text: str) -> Flag:
    if text == "-":
        return NO_FLAGS
    out = NO_FLAGS
    for name in text.split("|"):
        try:
            out |= Flag[name]
        except KeyError:
            raise ValueError(f"unknown TCP flag {name!r}") from None
    return out


class FiveTuple(NamedTuple):
    src_ip: IpAddr
    src_port: int
    dst_ip: IpAddr
    dst_port: int
    proto: Proto

    def reversed(self) -> FiveTuple:
        return FiveTuple(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.proto)

    def __str__(self):
        return (f"{self.proto.name.lower()}:{self.src_ip}:{self.src_port}"
                f"->{self.dst_ip}:{self.dst_port}")


@dataclass(frozen=True)
class Segment:
    src_mac: MacAddr
    dst_mac: MacAddr
    src_ip: IpAddr
    dst_ip: IpAddr
    proto: Proto
    src_port: int
    dst_port: int
    flags: Flag = NO_FLAGS
    seq: int = 0
    ack: int = 0
    payload: bytes = b""

    def __post_init__(self):
        for name in ("src_port", "dst_port"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v <= 65535:
                raise SegmentError(name, f"port out of range: {v!r}")
        for name in ("seq", "ack"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < MOD32:
                raise SegmentError(name, f"not an unsigned 32-bit value: {v!r}")
        if not isinstance(self.payload, bytes):
            raise SegmentError("payload", "must be bytes")
        if len(self.payload) > MTU_PAYLOAD:
            raise SegmentError("payload", f"{len(self.payload)} bytes exceeds cap {MTU_PAYLOAD}")
        if self.proto == Proto.TCP:
            if not self.flags:
                raise SegmentError("flags", "TCP segment needs at least one flag")
        elif self.proto == Proto.UDP:
            if self.flags or self.seq or self.ack:
                raise SegmentError("flags", "UDP segment carries no flags/seq/ack")
        else:
            raise SegmentError("proto", f"unsupported protocol {self.proto!r}")

    @property
    def five_tuple(self) -> FiveTuple:
        return FiveTuple(self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto)

    def has(self, flag: Flag) -> bool:
        return bool(self.flags & flag)

    def seq_len(self) -> int:
        """Sequence space consumed: payload plus one each for SYN and FIN."""
        n = len(self.payload)
        if self.flags & Flag.SYN:
            n += 1
        if self.flags & Flag.FIN:
            n += 1
        return n


def five_tuple_of(seg: Segment) -> FiveTuple:
    return seg.five_tuple


def make_segment(src, dst, *, proto="tcp", flags=(), seq=0, ack=0, payload=b"",
                 src_mac="02:00:00:00:00:01", dst_mac="02:00:00:00:00:02") -> Segment:
    """Build a segment from ``"ip:port"`` endpoint strings.

    ``flags`` is an iterable of names (``"SYN"``, ``"ACK"``...) or a ``Flag``.
    """
    src_ip, src_port = _endpoint(src, "src_port")
    dst_ip, dst_port = _endpoint(dst, "dst_port")
    if isinstance(proto, str):
        try:
            proto = Proto[proto.upper()]
        except KeyError:
            raise SegmentError("proto", f"unknown protocol {proto!r}") from None
    if not isinstance(flags, Flag):
        f = NO_FLAGS
        for name in flags:
            try:
                f |= Flag[name.upper()]
            except KeyError:
                raise SegmentError("flags", f"unknown flag {name!r}") from None
        flags = f
    return Segment(as_mac(src_mac), as_mac(dst_mac), src_ip, dst_ip, proto,
                   src_port, dst_port, flags, seq, ack, bytes(payload))


def _endpoint(text, field_name):
    ip, _, port = text.rpartition(":")
    try:
        port = int(port)
    except ValueError:
        raise SegmentError(field_name, f"bad port in {text!r}") from None
    return as_ip(ip), port


def split_payload(data: bytes, cap: int = MTU_PAYLOAD) -> list[bytes]:
    """Split an application write into MTU-sized chunks."""
    if not data:
        return []
    return [data[i:i + cap] for i in range(0, len(data), cap)]


# ---------------------------------------------------------------------------
# byte/string escaping shared by trace details and decoy logs

_ESCAPES = {ord("\\"): "\\\\", ord("'"): "\\'", ord("\r"): "\\r",
            ord("\n"): "\\n", ord("\t"): "\\t"}
_UNESCAPE = {"\\": 92, "'": 39, "r": 13, "n": 10, "t": 9}


def escape_bytes(data: bytes) -> str:
    out = []
    for b in data:
        if b in _ESCAPES:
            out.append(_ESCAPES[b])
        elif 0x20 <= b < 0x7F:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def unescape_bytes(text: str) -> bytes:
    out = bytearray()
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c != "\\":
            out.append(ord(c))
            i += 1
            continue
        if i + 1 >= n:
            raise ValueError("dangling escape")
        nxt = text[i + 1]
        if nxt == "x":
            out.append(int(text[i + 2:i + 4], 16))
            i += 4
        elif nxt in _UNESCAPE:
            out.append(_UNESCAPE[nxt])
            i += 2
        else:
            raise ValueError(f"bad escape \\{nxt}")
    return bytes(out)


def _escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape_field(text: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"t": "\t", "n": "\n"}.get(m.group(1), m.group(1)), text)


# ---------------------------------------------------------------------------
# traces

class Kind(str, enum.Enum):
    FRAME = "FrameDelivered"
    ALERT = "Alert"
    DECISION = "Decision"
    FLOW = "FlowInstalled"
    DECOY_LOG = "DecoyLog"
    TERMINATED = "ConnTerminated"


def format_time(us: int) -> str:
    return f"{us // 1000}.{us % 1000:03d}"


def parse_time(text: str) -> int:
    whole, _, frac = text.partition(".")
    if len(frac) != 3 or not whole.isdigit() or not frac.isdigit():
        raise ValueError(f"bad time {text!r}")
    return int(whole) * 1000 + int(frac)


@dataclass(frozen=True)
class TraceEvent:
    """One trace record. ``time`` is integer microseconds.

    FrameDelivered events carry ``segment``, ``relseq`` and ``relack``
    (``relack`` is None when the ACK flag is absent); every other kind
    carries string key/value pairs in ``detail``.
    """

    time: int
    kind: Kind
    location: str
    detail: dict = field(default_factory=dict)
    segment: Segment | None = None
    relseq: int = 0
    relack: int | None = None

    @property
    def time_ms(self) -> float:
        return self.time / 1000

    def endpoints(self) -> tuple[str, str]:
        """(sender, receiver) node names of a ``sender>receiver`` location."""
        a, _, b = self.location.partition(">")
        return a, b


def format_segment_columns(seg: Segment, relseq: int, relack: int | None) -> list[str]:
    return [
        f"{seg.src_ip}:{seg.src_port}",
        f"{seg.dst_ip}:{seg.dst_port}",
        format_flags(seg.flags),
        str(relseq),
        "-" if relack is None else str(relack),
        str(len(seg.payload)),
        str(seg.seq),
        str(seg.ack),
        str(seg.src_mac),
        str(seg.dst_mac),
        seg.proto.name.lower(),
        seg.payload.hex() or "-",
    ]


def parse_segment_columns(cols: list[str]) -> tuple[Segment, int, int | None]:
    if len(cols) != 12:
        raise ValueError(f"expected 12 segment columns, got {len(cols)}")
    src_ip, src_port = _endpoint(cols[0], "src_port")
    dst_ip, dst_port = _endpoint(cols[1], "dst_port")
    payload = b"" if cols[11] == "-" else bytes.fromhex(cols[11])
    if int(cols[5]) != len(payload):
        raise ValueError("length column disagrees with payload")
    seg = Segment(MacAddr.parse(cols[8]), MacAddr.parse(cols[9]), src_ip, dst_ip,
                  Proto[cols[10].upper()], src_port, dst_port, parse_flags(cols[2]),
                  int(cols[6]), int(cols[7]), payload)
    relack = None if cols[4] == "-" else int(cols[4])
    return seg, int(cols[3]), relack


def format_event(ev: TraceEvent) -> str:
    head = [format_time(ev.time), ev.kind.value, ev.location]
    if ev.kind is Kind.FRAME:
        return "\t".join(head + format_segment_columns(ev.segment, ev.relseq, ev.relack))
    tail = [f"{k}={_escape_field(str(v))}" for k, v in ev.detail.items()]
    return "\t".join(head + tail)


def parse_event(line: str) -> TraceEvent:
    cols = line.split("\t")
    if len(cols) < 3:
        raise ValueError(f"short trace line: {line!r}")
    time = parse_time(cols[0])
    kind = Kind(cols[1])
    if kind is Kind.FRAME:
        seg, relseq, relack = parse_segment_columns(cols[3:])
        return TraceEvent(time, kind, cols[2], segment=seg, relseq=relseq, relack=relack)
    detail = {}
    for col in cols[3:]:
        key, sep, value = col.partition("=")
        if not sep:
            raise ValueError(f"bad detail column {col!r}")
        detail[key] = _unescape_field(value)
    return TraceEvent(time, kind, cols[2], detail)


class Trace:
    """Append-only event log with Wireshark-style relative numbering.

    Relative sequence numbers are tracked per undirected link and
    connection: the SYN seen in each direction on that link fixes the base.
    """

    def __init__(self):
        self.events: list[TraceEvent] = []
        self._bases: dict = {}

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def record(self, time: int, kind: Kind, location: str, **detail):
        if self.events and time < self.events[-1].time:
            raise ValueError("trace time went backwards")
        ev = TraceEvent(time, kind, location, {k: str(v) for k, v in detail.items()})
        self.events.append(ev)
        return ev

    def record_frame(self, time: int, location: str, seg: Segment):
        if self.events and time < self.events[-1].time:
            raise ValueError("trace time went backwards")
        relseq, relack = seg.seq, (seg.ack if seg.flags & Flag.ACK else None)
        if seg.proto == Proto.TCP:
            a, _, b = location.partition(">")
            link = (a, b) if a < b else (b, a)
            src = (seg.src_ip.value, seg.src_port)
            dst = (seg.dst_ip.value, seg.dst_port)
            key = (link, (src, dst) if src < dst else (dst, src))
            if seg.flags & Flag.SYN:
                if seg.flags & Flag.ACK:
                    bases = self._bases.setdefault(key, {})
                else:
                    # a fresh SYN starts a new connection on this link
                    bases = self._bases[key] = {}
                bases[src] = seg.seq
            else:
                bases = self._bases.get(key)
            if bases:
                if src in bases:
                    relseq = (seg.seq - bases[src]) % MOD32
                if relack is not None and dst in bases:
                    relack = (seg.ack - bases[dst]) % MOD32
        ev = TraceEvent(time, Kind.FRAME, location, segment=seg, relseq=relseq, relack=relack)
        self.events.append(ev)
        return ev

    def to_text(self) -> str:
        return "".join(format_event(ev) + "\n" for ev in self.events)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> Trace:
        trace = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            try:
                trace.events.append(parse_event(line))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"trace line {lineno}: {exc}") from None
        return trace

    @classmethod
    def read(cls, path) -> Trace:
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def of_kind(self, kind: Kind) -> list[TraceEvent]:
        return [ev for ev in self.events if ev.kind is kind]
