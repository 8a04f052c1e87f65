"""Scripted LIH/MIH/HIH endpoints.

Each decoy runs a small TCP state machine (handshake, in-order delivery,
cumulative ACK, FIN/RST) and answers payload through per-port service
scripts. Received payload is written to an append-only activity log.
"""

from __future__ import annotations

import datetime
import enum
import random
import re
from dataclasses import dataclass, field

from honeydoc.core import (
    MOD32,
    Flag,
    IpAddr,
    MacAddr,
    Proto,
    Segment,
    escape_bytes,
    seq_add,
    split_payload,
    unescape_bytes,
)


class DecoyClass(str, enum.Enum):
    LIH = "LIH"
    MIH = "MIH"
    HIH = "HIH"


class DecoyError(ValueError):
    pass


@dataclass(frozen=True)
class Turn:
    expect: bytes | None  # None matches anything
    respond: bytes
    stage: str | None = None


@dataclass(frozen=True)
class ServiceScript:
    name: str
    turns: tuple
    log_tag: str = ""

    def __post_init__(self):
        if not self.turns:
            raise DecoyError(f"script {self.name!r} has no turns")
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.log_tag:
            object.__setattr__(self, "log_tag", self.name)

    def responding_turns(self):
        return sum(1 for t in self.turns if t.respond)


BUILTIN_SCRIPTS = {
    "smtp-postfix": ServiceScript("smtp-postfix", (
        Turn(b"HELO", b"250 mail.localdomain\r\n", "SMTP_HELO"),
        Turn(b"MAIL FROM", b"250 2.1.0 Ok\r\n", "SMTP_MAIL"),
        Turn(b"RCPT TO", b"250 2.1.5 Ok\r\n", "SMTP_RCPT"),
        Turn(b"DATA", b"354 End data with <CR><LF>.<CR><LF>\r\n", "SMTP_DATA"),
        Turn(None, b"250 2.0.0 Ok: queued\r\n", "SMTP_BODY"),
    ), "smtp"),
    "ftp-amun": ServiceScript("ftp-amun", (
        Turn(b"USER", b"331 Password required\r\n", "FTPD_STAGE1"),
        Turn(b"PASS", b"230 Login successful\r\n", "FTPD_STAGE1"),
        Turn(b"CWD", b"250 CWD command successful\r\n", "FTPD_STAGE2"),
        Turn(b"TYPE", b"200 Type set to A\r\n", "FTPD_STAGE2"),
    ), "vuln_ftp"),
    "ssh-banner": ServiceScript("ssh-banner", (
        Turn(None, b"SSH-2.0-OpenSSH_7.2p2 Ubuntu-4ubuntu2.10\r\n", "SSH_BANNER"),
    ), "ssh"),
    "distcc-listener": ServiceScript("distcc-listener", (
        Turn(None, b"", "DISTCC_REQUEST"),
    ), "distcc"),
}


@dataclass
class DecoyConfig:
    name: str
    decoy_class: DecoyClass
    ip: IpAddr
    mac: MacAddr
    switch_port: int
    open_ports: frozenset = frozenset()
    service_scripts: dict = field(default_factory=dict)  # port -> ServiceScript
    response_delay_ms: int = 0
    udp_ports: frozenset = frozenset()
    transparent: bool = False
    spf: bool | None = None  # None: decided by the mechanism
    isn: int | None = None

    def __post_init__(self):
        self.decoy_class = DecoyClass(self.decoy_class)
        self.open_ports = frozenset(self.open_ports)
        self.udp_ports = frozenset(self.udp_ports)
        for port, script in self.service_scripts.items():
            if port not in self.open_ports and port not in self.udp_ports:
                raise DecoyError(f"{self.name}: script on closed port {port}")
            if self.decoy_class is DecoyClass.LIH and script.responding_turns() > 1:
                raise DecoyError(
                    f"{self.name}: LIH script {script.name!r} responds more than once")
        if self.response_delay_ms < 0:
            raise DecoyError(f"{self.name}: negative response delay")


@dataclass(frozen=True)
class ActivityLogEntry:
    time: int  # microseconds
    decoy: str
    remote: str  # ip:port
    message: bytes
    stage: str
    script: str

    @property
    def byte_count(self):
        return len(self.message)

    @property
    def remote_ip(self):
        return self.remote.rpartition(":")[0]


class _State(enum.Enum):
    SYN_RCVD = 1
    ESTABLISHED = 2
    LAST_ACK = 3


@dataclass
class _Conn:
    state: _State
    isn: int
    snd_nxt: int
    rcv_nxt: int
    local_ip: IpAddr
    remote_mac: MacAddr
    turn: int = 0
    responses: int = 0
    received: bytearray = field(default_factory=bytearray)
    sent: bytearray = field(default_factory=bytearray)


class Decoy:
    """A decoy endpoint. ``on_segment`` is side-effect free apart from
    the decoy's own connection table and log."""

    def __init__(self, config: DecoyConfig, seed=0):
        self.config = config
        self.name = config.name
        self.rng = random.Random(f"{seed}/decoy/{config.name}")
        self.conns: dict = {}
        self.log: list[ActivityLogEntry] = []
        self.closed: list = []  # (time, remote, reason)
        self.streams: dict = {}  # (remote_ip, remote_port, local_port) -> [received, sent]

    def _new_isn(self):
        if self.config.isn is not None:
            return self.config.isn
        return self.rng.getrandbits(32)

    def _reply(self, seg, conn_or_ip, flags, seq, ack, payload=b""):
        local_ip = conn_or_ip if isinstance(conn_or_ip, IpAddr) else conn_or_ip.local_ip
        return Segment(self.config.mac, seg.src_mac, local_ip, seg.src_ip, seg.proto,
                       seg.dst_port, seg.src_port, flags, seq, ack, payload)

    def accepts(self, seg: Segment) -> bool:
        return self.config.transparent or seg.dst_ip == self.config.ip

    def on_segment(self, seg: Segment, now: int = 0):
        """Handle one inbound segment.

        Returns ``(responses, log_entries)`` where responses is a list of
        ``(delay_us, Segment)``.
        """
        if not self.accepts(seg):
            return [], []
        if seg.proto == Proto.UDP:
            return self._on_udp(seg, now)
        key = (seg.src_ip, seg.src_port, seg.dst_port)
        conn = self.conns.get(key)

        if seg.flags & Flag.RST:
            if conn is not None and seg.seq == conn.rcv_nxt:
                del self.conns[key]
                self.closed.append((now, f"{seg.src_ip}:{seg.src_port}", "rst"))
            return [], []

        if seg.flags & Flag.SYN and not seg.flags & Flag.ACK:
            if seg.dst_port not in self.config.open_ports:
                return [(0, self._reply(seg, seg.dst_ip, Flag.RST | Flag.ACK, 0,
                                        seq_add(seg.seq, 1)))], []
            if conn is None:
                isn = self._new_isn()
                conn = _Conn(_State.SYN_RCVD, isn, seq_add(isn, 1), seq_add(seg.seq, 1),
                             seg.dst_ip, seg.src_mac)
                self.conns[key] = conn
                self.streams[key] = [conn.received, conn.sent]
            if conn.state is _State.SYN_RCVD:
                return [(0, self._reply(seg, conn, Flag.SYN | Flag.ACK, conn.isn,
                                        conn.rcv_nxt))], []
            return [], []

        if conn is None:
            return [], []

        if conn.state is _State.SYN_RCVD:
            if seg.flags & Flag.ACK and seg.ack == conn.snd_nxt:
                conn.state = _State.ESTABLISHED
            else:
                return [], []

        if conn.state is _State.LAST_ACK:
            if seg.flags & Flag.ACK and seg.ack == conn.snd_nxt:
                del self.conns[key]
                self.closed.append((now, f"{seg.src_ip}:{seg.src_port}", "fin"))
            return [], []

        responses, logs = [], []
        if seg.payload:
            if seg.seq == conn.rcv_nxt:
                conn.rcv_nxt = seq_add(conn.rcv_nxt, len(seg.payload))
                conn.received += seg.payload
                entry, reply = self._app_input(conn, seg, now)
                if entry is not None:
                    logs.append(entry)
                if reply:
                    delay = self.config.response_delay_ms * 1000
                    for chunk in split_payload(reply):
                        responses.append((delay, self._reply(
                            seg, conn, Flag.PSH | Flag.ACK, conn.snd_nxt, conn.rcv_nxt, chunk)))
                        conn.snd_nxt = seq_add(conn.snd_nxt, len(chunk))
                        conn.sent += chunk
                elif not seg.flags & Flag.FIN:
                    responses.append((0, self._reply(seg, conn, Flag.ACK, conn.snd_nxt,
                                                     conn.rcv_nxt)))
            elif (conn.rcv_nxt - seg.seq) % MOD32 < 1 << 31:
                # duplicate of delivered data: re-acknowledge only
                responses.append((0, self._reply(seg, conn, Flag.ACK, conn.snd_nxt,
                                                 conn.rcv_nxt)))
                return responses, logs
            else:
                return [], []

        if seg.flags & Flag.FIN:
            fin_seq = seq_add(seg.seq, len(seg.payload))
            if fin_seq == conn.rcv_nxt:
                conn.rcv_nxt = seq_add(conn.rcv_nxt, 1)
                delay = responses[-1][0] if responses else 0
                responses.append((delay, self._reply(seg, conn, Flag.FIN | Flag.ACK,
                                                     conn.snd_nxt, conn.rcv_nxt)))
                conn.snd_nxt = seq_add(conn.snd_nxt, 1)
                conn.state = _State.LAST_ACK
        return responses, logs

    def _app_input(self, conn, seg, now):
        remote = f"{seg.src_ip}:{seg.src_port}"
        script = self.config.service_scripts.get(seg.dst_port)
        reply = b""
        stage = None
        if script is not None and conn.turn < len(script.turns):
            turn = script.turns[conn.turn]
            if turn.expect is None or turn.expect in seg.payload:
                conn.turn += 1
                stage = turn.stage
                limit = 1 if self.config.decoy_class is DecoyClass.LIH else None
                if turn.respond and (limit is None or conn.responses < limit):
                    reply = turn.respond
                    conn.responses += 1
        tag = script.log_tag if script is not None else "tcp"
        if self.config.decoy_class is DecoyClass.HIH:
            return hih_record_activity(self, seg, now, tag), reply
        if stage is None:
            return None, reply
        entry = ActivityLogEntry(now, self.name, remote, seg.payload, stage, tag)
        self.log.append(entry)
        return entry, reply

    def _on_udp(self, seg, now):
        if seg.dst_port not in self.config.udp_ports or not seg.payload:
            return [], []
        script = self.config.service_scripts.get(seg.dst_port)
        tag = script.log_tag if script is not None else "udp"
        remote = f"{seg.src_ip}:{seg.src_port}"
        if self.config.decoy_class is DecoyClass.HIH:
            entry = hih_record_activity(self, seg, now, tag)
        else:
            stage = script.turns[0].stage if script is not None else None
            entry = ActivityLogEntry(now, self.name, remote, seg.payload, stage or "UDP", tag)
            self.log.append(entry)
        responses = []
        if script is not None and script.turns[0].respond:
            responses.append((self.config.response_delay_ms * 1000, Segment(
                self.config.mac, seg.src_mac, seg.dst_ip, seg.src_ip, Proto.UDP,
                seg.dst_port, seg.src_port, payload=script.turns[0].respond[:1448])))
        return responses, [entry]


def endpoint_on_segment(decoy: Decoy, seg: Segment, now: int = 0):
    return decoy.on_segment(seg, now)


def hih_record_activity(decoy: Decoy, seg: Segment, now: int = 0, tag: str = "hih"):
    """Command-level activity capture for high-interaction decoys.

    Every payload-bearing segment produces one entry; empty segments
    produce none (and return None).
    """
    if decoy.config.decoy_class is not DecoyClass.HIH:
        raise DecoyError(f"{decoy.name} is {decoy.config.decoy_class.value}, not HIH")
    if not seg.payload:
        return None
    entry = ActivityLogEntry(now, decoy.name, f"{seg.src_ip}:{seg.src_port}",
                             seg.payload, "COMMAND", tag)
    decoy.log.append(entry)
    return entry


# ---------------------------------------------------------------------------
# log export

DEFAULT_EPOCH = datetime.datetime(2000, 1, 1)

_LOG_LINE = re.compile(
    r"^(?P<ts>\d{4}-\d\d-\d\d \d\d:\d\d:\d\d,\d{3}) INFO \[(?P<script>[^\]]*)\] "
    r"Attacker: (?P<ip>\S+) Message: \['(?P<msg>(?:[^'\\]|\\.)*)'\] "
    r"Bytes: (?P<n>\d+) Stage: (?P<stage>\S+)$")


def format_timestamp(us: int, epoch=DEFAULT_EPOCH) -> str:
    ts = epoch + datetime.timedelta(microseconds=us)
    return ts.strftime("%Y-%m-%d %H:%M:%S") + f",{ts.microsecond // 1000:03d}"


def format_log_entry(entry: ActivityLogEntry, epoch=DEFAULT_EPOCH) -> str:
    return (f"{format_timestamp(entry.time, epoch)} INFO [{entry.script}] "
            f"Attacker: {entry.remote_ip} Message: ['{escape_bytes(entry.message)}'] "
            f"Bytes: {entry.byte_count} Stage: {entry.stage}")


def export_logs(decoy: Decoy, epoch=DEFAULT_EPOCH) -> str:
    return "".join(format_log_entry(e, epoch) + "\n" for e in decoy.log)


def parse_log_line(line: str) -> dict:
    m = _LOG_LINE.match(line)
    if m is None:
        raise ValueError(f"not an activity log line: {line!r}")
    message = unescape_bytes(m.group("msg"))
    if len(message) != int(m.group("n")):
        raise ValueError("byte count does not match message")
    return {"timestamp": m.group("ts"), "script": m.group("script"), "ip": m.group("ip"),
            "message": message, "bytes": int(m.group("n")), "stage": m.group("stage")}
