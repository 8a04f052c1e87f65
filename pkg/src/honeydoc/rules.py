"""Snort-subset classification rules.

Grammar (one rule per line)::

    alert <proto> <src-ip> <src-port> -> <dst-ip> <dst-port> (<options>)

``proto`` is ``tcp``, ``udp`` or ``any``; addresses are dotted IPv4 or
``any``; ports are a single number or ``any``. The only options accepted
are ``msg`` (one of DROP, MIH, HIH), ``sid``, ``priority`` and ``content``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from honeydoc import kernels
from honeydoc.core import IpAddr, Proto, Segment

# sid missing sorts after every numbered rule
_NO_SID = 1 << 62


class RuleSyntaxError(ValueError):
    def __init__(self, message, offset=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


class Action(str, enum.Enum):
    DROP = "DROP"
    MIH = "MIH"
    HIH = "HIH"


@dataclass(frozen=True)
class ClassificationRule:
    proto: str
    src_ip: IpAddr | None
    src_port: int | None
    dst_ip: IpAddr | None
    dst_port: int | None
    action: Action
    sid: int | None = None
    priority: int = 0
    content: bytes | None = None

    @property
    def precedence(self):
        return (-self.priority, _NO_SID if self.sid is None else self.sid)

    def header_row(self):
        """Packed header constraints for the matching kernels."""
        mask = 0
        vals = [0] * 6
        if self.proto != "any":
            mask |= 2
            vals[1] = int(Proto[self.proto.upper()])
        for bit, pos, value in ((4, 2, self.src_ip), (8, 3, self.dst_ip)):
            if value is not None:
                mask |= bit
                vals[pos] = value.value
        for bit, pos, value in ((16, 4, self.src_port), (32, 5, self.dst_port)):
            if value is not None:
                mask |= bit
                vals[pos] = value
        return (mask, *vals)

    def header_matches(self, seg: Segment) -> bool:
        if self.proto != "any" and Proto[self.proto.upper()] != seg.proto:
            return False
        if self.src_ip is not None and self.src_ip != seg.src_ip:
            return False
        if self.dst_ip is not None and self.dst_ip != seg.dst_ip:
            return False
        if self.src_port is not None and self.src_port != seg.src_port:
            return False
        if self.dst_port is not None and self.dst_port != seg.dst_port:
            return False
        return True


@dataclass(frozen=True)
class Alert:
    action: Action
    sid: int | None
    matched_rule_priority: int


@dataclass
class TranslationResult:
    dataplane_entries: list = field(default_factory=list)
    controller_rules: list = field(default_factory=list)

    @property
    def drop_entries(self):
        from honeydoc.dataplane import Drop
        return [e for e in self.dataplane_entries if e.actions == (Drop(),)]


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\S+")
_OPTION_KEYS = ("msg", "sid", "priority", "content")


def _byte_offset(text, index):
    return len(text[:index].encode("utf-8"))


def parse_rule(text: str, line: int | None = None) -> ClassificationRule:
    def fail(message, index):
        raise RuleSyntaxError(message, _byte_offset(text, index), line)

    paren = text.find("(")
    head_end = paren if paren >= 0 else len(text)
    tokens = [(m.group(), m.start()) for m in _TOKEN.finditer(text, 0, head_end)]
    names = ("keyword", "protocol", "source ip", "source port", "direction",
             "destination ip", "destination port")
    if len(tokens) < len(names):
        missing = names[len(tokens)]
        fail(f"missing {missing}", head_end)
    if len(tokens) > len(names):
        fail(f"unexpected token {tokens[len(names)][0]!r}", tokens[len(names)][1])
    if paren < 0:
        fail("missing options block", len(text))

    (kw, kw_at), (proto, proto_at), (sip, sip_at), (sport, sport_at), \
        (arrow, arrow_at), (dip, dip_at), (dport, dport_at) = tokens
    if kw != "alert":
        fail(f"expected 'alert', got {kw!r}", kw_at)
    proto = proto.lower()
    if proto not in ("tcp", "udp", "any"):
        fail(f"unsupported protocol {proto!r}", proto_at)
    if arrow not in ("->", "→"):
        fail(f"expected '->', got {arrow!r}", arrow_at)
    src_ip = _parse_addr(sip, sip_at, fail)
    dst_ip = _parse_addr(dip, dip_at, fail)
    src_port = _parse_port(sport, sport_at, fail)
    dst_port = _parse_port(dport, dport_at, fail)

    close = text.rfind(")")
    if close < paren:
        fail("unterminated options block", len(text))
    if text[close + 1:].strip():
        fail("trailing text after options", close + 1)
    options = _parse_options(text, paren + 1, close, fail)

    if "msg" not in options:
        fail("missing msg option", paren)
    msg_value, msg_at = options["msg"]
    try:
        action = Action(msg_value.decode("ascii", "replace"))
    except ValueError:
        fail(f"unknown action {msg_value.decode('ascii', 'replace')!r} in msg "
             "(expected DROP, MIH or HIH)", msg_at)
    sid = _int_option(options, "sid", fail)
    priority = _int_option(options, "priority", fail)
    content = options["content"][0] if "content" in options else None
    if content == b"":
        fail("empty content pattern", options["content"][1])
    return ClassificationRule(proto, src_ip, src_port, dst_ip, dst_port, action,
                              sid, 0 if priority is None else priority, content)


def _parse_addr(tok, at, fail):
    if tok.lower() == "any":
        return None
    try:
        return IpAddr.parse(tok)
    except ValueError:
        fail(f"bad address {tok!r}", at)


def _parse_port(tok, at, fail):
    if tok.lower() == "any":
        return None
    if not tok.isdigit() or int(tok) > 65535:
        fail(f"bad port {tok!r} (single port or 'any')", at)
    return int(tok)


def _int_option(options, key, fail):
    if key not in options:
        return None
    raw, at = options[key]
    try:
        return int(raw.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        fail(f"{key} must be an integer", at)


def _parse_options(text, start, end, fail):
    """Parse ``key:value;`` pairs between ``start`` and ``end``.

    Returns ``{key: (value_bytes, char_index)}``. Quoted values support
    ``\\"``, ``\\\\``, ``\\;`` and ``|41 42|`` hex blocks.
    """
    options = {}
    i = start
    while True:
        while i < end and text[i].isspace():
            i += 1
        if i >= end:
            return options
        key_at = i
        while i < end and (text[i].isalnum() or text[i] == "_"):
            i += 1
        key = text[key_at:i]
        if not key:
            fail(f"unexpected character {text[i]!r} in options", i)
        if key not in _OPTION_KEYS:
            fail(f"unsupported option {key!r}", key_at)
        if key in options:
            fail(f"duplicate option {key!r}", key_at)
        while i < end and text[i].isspace():
            i += 1
        if i >= end or text[i] != ":":
            fail(f"expected ':' after {key}", i)
        i += 1
        while i < end and text[i].isspace():
            i += 1
        value_at = i
        if i < end and text[i] == '"':
            value, i = _quoted(text, i + 1, end, fail)
        else:
            j = i
            while i < end and text[i] != ";":
                i += 1
            value = text[j:i].strip().encode("utf-8")
            if not value:
                fail(f"empty value for {key}", j)
        options[key] = (value, value_at)
        while i < end and text[i].isspace():
            i += 1
        if i < end:
            if text[i] != ";":
                fail("expected ';' between options", i)
            i += 1


def _quoted(text, i, end, fail):
    out = bytearray()
    while i < end:
        c = text[i]
        if c == '"':
            return bytes(out), i + 1
        if c == "\\":
            if i + 1 >= end:
                fail("dangling escape", i)
            out += text[i + 1].encode("utf-8")
            i += 2
        elif c == "|":
            close = text.find("|", i + 1, end)
            if close < 0:
                fail("unterminated hex block", i)
            try:
                out += bytes.fromhex(text[i + 1:close])
            except ValueError:
                fail("bad hex block", i)
            i = close + 1
        else:
            out += c.encode("utf-8")
            i += 1
    fail("unterminated string", i)


def format_rule(rule: ClassificationRule) -> str:
    def any_or(v):
        return "any" if v is None else str(v)

    opts = [f'msg:"{rule.action.value}";']
    if rule.sid is not None:
        opts.append(f"sid:{rule.sid};")
    opts.append(f"priority:{rule.priority};")
    if rule.content is not None:
        opts.append(f'content:"{_format_content(rule.content)}";')
    return (f"alert {rule.proto} {any_or(rule.src_ip)} {any_or(rule.src_port)} -> "
            f"{any_or(rule.dst_ip)} {any_or(rule.dst_port)} ({' '.join(opts)})")


def _format_content(content):
    out = []
    for b in content:
        if 0x20 <= b < 0x7F and chr(b) not in '"\\;|':
            out.append(chr(b))
        else:
            out.append(f"|{b:02x}|")
    return "".join(out)


def parse_ruleset(text: str) -> list[ClassificationRule]:
    rules = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rule = parse_rule(line, line=lineno)
        if rule.sid is not None:
            if rule.sid in seen:
                raise RuleSyntaxError(
                    f"duplicate sid {rule.sid} (first on line {seen[rule.sid]})", line=lineno)
            seen[rule.sid] = lineno
        rules.append(rule)
    return rules


def load_ruleset(path) -> list[ClassificationRule]:
    with open(path, encoding="utf-8") as fh:
        return parse_ruleset(fh.read())


# ---------------------------------------------------------------------------
# translation and classification

def rule_match_fields(rule: ClassificationRule):
    from honeydoc.dataplane import MatchFields
    proto = None if rule.proto == "any" else Proto[rule.proto.upper()]
    return MatchFields(proto=proto, src_ip=rule.src_ip, dst_ip=rule.dst_ip,
                       src_port=rule.src_port, dst_port=rule.dst_port)


def translate_rules(rules) -> TranslationResult:
    """Split rules into data-plane drops and controller-bound entries.

    Only DROP rules without a content pattern can be enforced by the switch
    alone; everything else is sent to the controller for payload inspection.
    """
    from honeydoc.dataplane import Drop, FlowEntry, ToController
    result = TranslationResult()
    for rule in rules:
        if rule.action is Action.DROP and rule.content is None:
            actions = (Drop(),)
        else:
            actions = (ToController(),)
            result.controller_rules.append(rule)
        result.dataplane_entries.append(
            FlowEntry(priority=rule.priority, match=rule_match_fields(rule), actions=actions))
    return result


def _seg_key(seg):
    return (0, int(seg.proto), seg.src_ip.value, seg.dst_ip.value, seg.src_port, seg.dst_port)


class Classifier:
    """Precompiled ruleset; ``classify`` returns the winning Alert or None."""

    def __init__(self, rules):
        self.rules = sorted(rules, key=lambda r: r.precedence)
        self._packed = kernels.pack_rows([r.header_row() for r in self.rules])
        self._contents = [r.content for r in self.rules]
        self.calls = 0

    def classify(self, seg: Segment) -> Alert | None:
        self.calls += 1
        idx = kernels.first_rule_match(self._packed, self._contents, _seg_key(seg), seg.payload)
        if idx < 0:
            return None
        rule = self.rules[idx]
        return Alert(rule.action, rule.sid, rule.priority)


def classify(seg: Segment, rules) -> Alert | None:
    """Best-matching rule's Alert: highest priority, then lowest sid.

    Returns None when nothing matches; callers treat that as DROP.
    """
    return Classifier(rules).classify(seg)

