import pytest
from hypothesis import given
from hypothesis import strategies as st

from honeydoc.core import IpAddr, make_segment
from honeydoc.dataplane import Drop, ToController
from honeydoc.rules import (
    Action,
    ClassificationRule,
    Classifier,
    RuleSyntaxError,
    classify,
    format_rule,
    parse_rule,
    parse_ruleset,
    translate_rules,
)
from oracles import classify_ref

OPEN_PORTS_RULES = """\
alert tcp any any → any 21 (msg:"MIH"; sid:1000002; priority:2;)
alert tcp any any → any 25 (msg:"HIH"; sid:1000005; priority:2;)
alert tcp any any → any any (msg:"DROP"; sid:1000008; priority:0;)
"""


def test_parse_open_port_rules():
    rules = parse_ruleset(OPEN_PORTS_RULES)
    assert [(r.dst_port, r.action, r.sid, r.priority) for r in rules] == [
        (21, Action.MIH, 1000002, 2), (25, Action.HIH, 1000005, 2),
        (None, Action.DROP, 1000008, 0)]


def test_rule_without_sid_or_priority():
    rule = parse_rule('alert tcp any any -> any 3632 (msg:"HIH")')
    assert rule.sid is None and rule.priority == 0 and rule.action is Action.HIH


def test_content_with_escapes_and_hex():
    rule = parse_rule(r'alert tcp any any -> any 80 (msg:"DROP"; content:"GET \"x|0d 0a|";)')
    assert rule.content == b'GET "x\r\n'


def test_addresses():
    rule = parse_rule('alert udp 10.1.0.2 53 -> 10.1.1.2 any (msg:"MIH"; sid:3;)')
    assert rule.src_ip == IpAddr.parse("10.1.0.2") and rule.src_port == 53
    assert rule.dst_port is None


@pytest.mark.parametrize("text,fragment,offset", [
    ('alert tcp any any -> any 21 (msg:"FOO"; sid:1;)', "unknown action", 33),
    ('alert tcp any any -> any 21 (msg:"MIH"; flow:established;)', "unsupported option", 40),
    ('alert icmp any any -> any 21 (msg:"MIH";)', "unsupported protocol", 6),
    ('alert tcp any any <- any 21 (msg:"MIH";)', "expected '->'", 18),
    ('alert tcp any 70000 -> any 21 (msg:"MIH";)', "bad port", 14),
    ('alert tcp any any -> any 21 (sid:1;)', "missing msg", 28),
    ('alert tcp any any -> any 21 (msg:"MIH"; msg:"HIH";)', "duplicate option", 40),
    ('alert tcp any any -> any 21 (msg:"MIH"; sid:abc;)', "sid must be an integer", 44),
    ('alert tcp any any -> any', "missing destination port", 24),
    ('alert tcp any any -> any 21 (msg:"MIH"', "unterminated", None),
])
def test_syntax_errors(text, fragment, offset):
    with pytest.raises(RuleSyntaxError) as err:
        parse_rule(text)
    assert fragment in str(err.value)
    if offset is not None:
        assert err.value.offset == offset


def test_error_offset_is_in_bytes():
    # the arrow is three bytes in UTF-8
    with pytest.raises(RuleSyntaxError) as err:
        parse_rule('alert tcp any any → any 21 (msg:"NOPE";)')
    assert err.value.offset == 'alert tcp any any → any 21 (msg:'.encode().__len__()


def test_ruleset_duplicate_sid_reports_line():
    text = OPEN_PORTS_RULES + 'alert tcp any any -> any 23 (msg:"MIH"; sid:1000002;)\n'
    with pytest.raises(RuleSyntaxError) as err:
        parse_ruleset(text)
    assert err.value.line == 4


def test_ruleset_skips_comments():
    assert parse_ruleset("# nothing\n\n") == []


def test_translation_splits_drop_rules():
    rules = parse_ruleset(OPEN_PORTS_RULES + 'alert tcp any any -> any 80 '
                          '(msg:"DROP"; sid:9; priority:1; content:"evil";)\n')
    result = translate_rules(rules)
    assert [e.actions for e in result.dataplane_entries] == [
        (ToController(),), (ToController(),), (Drop(),), (ToController(),)]
    assert len(result.drop_entries) == 1
    # the content-bearing DROP rule still needs payload inspection
    assert [r.sid for r in result.controller_rules] == [1000002, 1000005, 9]
    assert [e.priority for e in result.dataplane_entries] == [2, 2, 0, 1]


def test_classify_precedence():
    rules = parse_ruleset("""
alert tcp any any -> any 25 (msg:"MIH"; sid:20; priority:1;)
alert tcp any any -> any 25 (msg:"HIH"; sid:10; priority:1;)
alert tcp any any -> any any (msg:"DROP"; sid:1; priority:0;)
""")
    seg = make_segment("1.1.1.1:5", "2.2.2.2:25", flags=["PSH", "ACK"], payload=b"HELO")
    alert = classify(seg, rules)
    assert (alert.action, alert.sid, alert.matched_rule_priority) == (Action.HIH, 10, 1)


def test_classify_content_and_no_match():
    rules = parse_ruleset('alert tcp any any -> any 80 (msg:"HIH"; sid:1; content:"cmd.exe";)')
    hit = make_segment("1.1.1.1:5", "2.2.2.2:80", flags=["ACK"], payload=b"GET /cmd.exe")
    miss = make_segment("1.1.1.1:5", "2.2.2.2:80", flags=["ACK"], payload=b"GET /")
    assert classify(hit, rules).action is Action.HIH
    assert classify(miss, rules) is None


def test_classifier_counts_calls():
    c = Classifier(parse_ruleset(OPEN_PORTS_RULES))
    c.classify(make_segment("1.1.1.1:5", "2.2.2.2:21", flags=["ACK"]))
    assert c.calls == 1


ports = st.one_of(st.none(), st.integers(0, 65535))
ips = st.one_of(st.none(), st.integers(0, 2 ** 32 - 1).map(IpAddr))
contents = st.one_of(st.none(), st.binary(min_size=1, max_size=8))
rules_st = st.builds(ClassificationRule, st.sampled_from(["tcp", "udp", "any"]), ips, ports,
                     ips, ports, st.sampled_from(list(Action)),
                     st.one_of(st.none(), st.integers(0, 10 ** 6)), st.integers(0, 100), contents)


@given(rules_st)
def test_format_parse_round_trip(rule):
    assert parse_rule(format_rule(rule)) == rule


@given(st.lists(rules_st, max_size=6), st.sampled_from(["tcp", "udp"]),
       st.sampled_from([21, 25, 80]), st.binary(max_size=16))
def test_classify_agrees_with_linear_scan(rules, proto, port, payload):
    flags = ["ACK"] if proto == "tcp" else []
    seg = make_segment("10.0.0.1:4000", f"10.0.0.2:{port}", proto=proto, flags=flags,
                       payload=payload)
    got = classify(seg, rules)
    ref = classify_ref(rules, seg)
    if ref is None:
        assert got is None
    else:
        assert (got.action, got.sid, got.matched_rule_priority) == (
            ref.action, ref.sid, ref.priority)


@given(st.lists(rules_st, max_size=8))
def test_drop_entries_only_for_plain_drop_rules(rules):
    result = translate_rules(rules)
    assert len(result.dataplane_entries) == len(rules)
    for rule, entry in zip(rules, result.dataplane_entries):
        plain_drop = rule.action is Action.DROP and rule.content is None
        assert (entry.actions == (Drop(),)) == plain_drop
        assert entry.priority == rule.priority
