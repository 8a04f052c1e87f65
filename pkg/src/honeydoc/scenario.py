"""Scenario files and run wiring.

A scenario is an INI-style file::

    [scenario]
    mechanism = m2
    seed = 7
    rules = ssh.rules          ; relative to the scenario file
    frontend = mih

    [topology]
    link_latency_ms = 1

    [decoy mih]
    class = MIH
    ip = 10.1.1.2
    mac = 02:00:00:00:01:02
    port = 2
    open_ports = 22
    scripts = 22:ssh-banner

    [attacker a1]
    ip = 10.1.0.2
    target = 10.1.1.2:22
    send.1 = SSH-2.0-client\\r\\n

Payload values use the trace escape syntax (``\\r``, ``\\n``, ``\\xNN``).
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from honeydoc.core import IpAddr, MacAddr, unescape_bytes
from honeydoc.dataplane import Role, SwitchNode
from honeydoc.decoys import (
    BUILTIN_SCRIPTS,
    Decoy,
    DecoyClass,
    DecoyConfig,
    DecoyError,
    ServiceScript,
    Turn,
)
from honeydoc.orchestrator import (
    ConfigError,
    Controller,
    DecoySite,
    Mechanism,
    OutboundPolicy,
    init_controller,
)
from honeydoc.rules import RuleSyntaxError, load_ruleset
from honeydoc.simnet import (
    MS,
    AttackerModel,
    DecoyAdapter,
    Simulator,
    SwitchAdapter,
    Topology,
    TopologyError,
    attacker_drive,
)

SCENARIO_DIR = Path(__file__).parent / "scenarios"
FCF_NAME = "fcf"
SEED_ENV = "HONEYDOC_SEED"


class ScenarioError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class TopologyParams:
    link_latency_us: int = 1 * MS
    controller_channel_latency_us: int = 5 * MS
    controller_processing_us: int = 2 * MS
    decision_delay_us: int = 0
    handshake_timeout_us: int = 3000 * MS
    flow_idle_timeout_us: int | None = None


@dataclass
class Scenario:
    name: str
    mechanism: Mechanism
    seed: int
    rules: list
    decoys: list  # DecoyConfig, declaration order
    attackers: list  # AttackerModel
    topology: TopologyParams = field(default_factory=TopologyParams)
    rules_path: Path | None = None
    frontend: str | None = None
    direct_target: str | None = None
    policy: OutboundPolicy | None = None
    horizon_ms: int | None = None
    controller_isn: int | None = None
    scripts: dict = field(default_factory=dict)

    def decoy(self, name) -> DecoyConfig:
        for d in self.decoys:
            if d.name == name:
                return d
        raise KeyError(name)

    def with_mechanism(self, mechanism, **changes):
        """Copy with another mechanism; frontend/direct target defaults follow."""
        mechanism = Mechanism(mechanism)
        kw = dict(self.__dict__)
        kw.update(mechanism=mechanism, **changes)
        out = Scenario(**kw)
        _fill_defaults(out)
        return out


# ---------------------------------------------------------------------------
# parsing

_KEY_LINE = re.compile(r"^\s*([^=#;\s][^=]*?)\s*=")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text):
    """``{(section, key): line}`` so errors can point at the source."""
    where = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        m = _SECTION_LINE.match(raw)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = lineno
            continue
        m = _KEY_LINE.match(raw)
        if m and section is not None and not raw[:1].isspace():
            where.setdefault((section, m.group(1).strip()), lineno)
    return where


def _ms_to_us(value):
    return round(float(value) * MS)


def _bool(value):
    v = value.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected yes/no, got {value!r}")


def _port_list(value):
    return frozenset(int(p) for p in re.split(r"[,\s]+", value.strip()) if p)


def _endpoint(value):
    ip, _, port = value.strip().rpartition(":")
    return IpAddr.parse(ip), int(port)


class _Reader:
    def __init__(self, text, path):
        self.path = path
        self.lines = _line_index(text)
        self.cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                            inline_comment_prefixes=(";",))
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            msg = getattr(exc, "message", str(exc)).splitlines()[0]
            raise ScenarioError(msg, path, line) from None

    def fail(self, message, section, key=None):
        line = self.lines.get((section, key), self.lines.get((section, None)))
        raise ScenarioError(f"[{section}] {message}", self.path, line)

    def get(self, section, key, conv=str, default=None, required=False):
        sect = self.cp[section]
        if key not in sect:
            if required:
                self.fail(f"missing required key {key!r}", section)
            return default
        try:
            return conv(sect[key])
        except (ValueError, TypeError, KeyError, DecoyError) as exc:
            self.fail(f"{key}: {exc}", section, key)

    def sections(self, prefix):
        out = []
        for name in self.cp.sections():
            kind, _, rest = name.partition(" ")
            if kind == prefix:
                if not rest.strip():
                    self.fail(f"section needs a name, e.g. [{prefix} NAME]", name)
                out.append((name, rest.strip()))
        return out


def _parse_turn(value):
    parts = [p.strip() for p in value.split("|")]
    if len(parts) not in (2, 3):
        raise ValueError("turn must be 'expect | respond' or 'expect | respond | stage'")
    expect = None if parts[0] in ("", "*") else unescape_bytes(parts[0])
    stage = parts[2] if len(parts) == 3 and parts[2] else None
    return Turn(expect, unescape_bytes(parts[1]), stage)


def _numbered(section, prefix):
    items = []
    for key in section:
        if key.startswith(prefix + "."):
            idx = key[len(prefix) + 1:]
            if not idx.isdigit():
                raise ValueError(f"bad key {key!r}; expected {prefix}.N")
            items.append((int(idx), key))
    return [key for _, key in sorted(items)]


_KNOWN = {
    "scenario": {"mechanism", "seed", "horizon_ms", "rules", "frontend", "direct_target",
                 "controller_isn", "name"},
    "topology": {"link_latency_ms", "controller_channel_latency_ms", "controller_processing_ms",
                 "decision_delay_ms", "handshake_timeout_ms", "flow_idle_timeout_ms"},
    "decoy": {"class", "ip", "mac", "port", "open_ports", "scripts", "udp_ports",
              "response_delay_ms", "transparent", "spf", "isn"},
    "attacker": {"ip", "mac", "port", "target", "connections", "rate_per_s", "src_port",
                 "start_ms", "retransmit_initial_ms", "retransmit_backoff_factor",
                 "max_retries", "isn"},
    "script": {"log_tag"},
    "policy": {"default"},
}


def _check_keys(r, section, kind):
    for key in r.cp[section]:
        if key in _KNOWN[kind]:
            continue
        if kind == "attacker" and key.startswith("send."):
            continue
        if kind == "script" and key.startswith("turn."):
            continue
        if kind == "policy" and key.startswith("redirect."):
            continue
        r.fail(f"unknown key {key!r}", section, key)


def parse_scenario(text: str, path="<scenario>", base_dir=None, seed=None) -> Scenario:
    r = _Reader(text, path)
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    known_sections = {"scenario", "topology", "policy"}
    for name in r.cp.sections():
        kind = name.split(" ", 1)[0]
        if name not in known_sections and kind not in ("decoy", "attacker", "script"):
            r.fail("unknown section", name)
    if "scenario" not in r.cp:
        raise ScenarioError("missing [scenario] section", path)
    _check_keys(r, "scenario", "scenario")

    # scripts first so decoys can refer to them
    scripts = dict(BUILTIN_SCRIPTS)
    for section, name in r.sections("script"):
        _check_keys(r, section, "script")
        keys = _numbered(r.cp[section], "turn")
        if not keys:
            r.fail("script has no turn.N entries", section)
        turns = tuple(r.get(section, k, _parse_turn) for k in keys)
        scripts[name] = ServiceScript(name, turns, r.get(section, "log_tag", default=name))

    def script_map(value):
        out = {}
        for item in re.split(r"[,\s]+", value.strip()):
            if not item:
                continue
            port, _, sname = item.partition(":")
            if sname not in scripts:
                raise ValueError(f"unknown script {sname!r}")
            out[int(port)] = scripts[sname]
        return out

    decoys = []
    for section, name in r.sections("decoy"):
        _check_keys(r, section, "decoy")
        try:
            cfg = DecoyConfig(
                name=name,
                decoy_class=r.get(section, "class", lambda v: DecoyClass(v.strip().upper()),
                                  required=True),
                ip=r.get(section, "ip", IpAddr.parse, required=True),
                mac=r.get(section, "mac", MacAddr.parse, required=True),
                switch_port=r.get(section, "port", int, required=True),
                open_ports=r.get(section, "open_ports", _port_list, frozenset()),
                service_scripts=r.get(section, "scripts", script_map, {}),
                response_delay_ms=r.get(section, "response_delay_ms", int, 0),
                udp_ports=r.get(section, "udp_ports", _port_list, frozenset()),
                transparent=r.get(section, "transparent", _bool, False),
                spf=r.get(section, "spf", _bool, None),
                isn=r.get(section, "isn", int, None),
            )
        except DecoyError as exc:
            r.fail(str(exc), section)
        decoys.append(cfg)

    attackers = []
    for section, name in r.sections("attacker"):
        _check_keys(r, section, "attacker")
        target = r.get(section, "target", _endpoint)
        sends = tuple(r.get(section, k, unescape_bytes) for k in _numbered(r.cp[section], "send"))
        try:
            model = AttackerModel(
                name=name,
                ip=r.get(section, "ip", IpAddr.parse, required=True),
                mac=r.get(section, "mac", MacAddr.parse, MacAddr.parse("02:00:00:00:00:01")),
                target_ip=target[0] if target else None,
                target_port=target[1] if target else None,
                script=sends,
                retransmit_initial_ms=r.get(section, "retransmit_initial_ms", int, 200),
                retransmit_backoff_factor=r.get(section, "retransmit_backoff_factor", float, 2.0),
                max_retries=r.get(section, "max_retries", int, 3),
                connection_rate_per_s=r.get(section, "rate_per_s", float, 1.0),
                connections=r.get(section, "connections", int, 1),
                src_port=r.get(section, "src_port", int, 40000),
                start_ms=r.get(section, "start_ms", int, 0),
                switch_port=r.get(section, "port", int, 1),
                isn=r.get(section, "isn", int, None),
            )
        except ValueError as exc:
            r.fail(str(exc), section)
        attackers.append(model)

    topo = TopologyParams()
    if "topology" in r.cp:
        _check_keys(r, "topology", "topology")
        topo = TopologyParams(
            link_latency_us=r.get("topology", "link_latency_ms", _ms_to_us, 1 * MS),
            controller_channel_latency_us=r.get("topology", "controller_channel_latency_ms",
                                                _ms_to_us, 5 * MS),
            controller_processing_us=r.get("topology", "controller_processing_ms",
                                           _ms_to_us, 2 * MS),
            decision_delay_us=r.get("topology", "decision_delay_ms", _ms_to_us, 0),
            handshake_timeout_us=r.get("topology", "handshake_timeout_ms", _ms_to_us, 3000 * MS),
            flow_idle_timeout_us=r.get("topology", "flow_idle_timeout_ms", _ms_to_us, None),
        )

    policy = None
    if "policy" in r.cp:
        _check_keys(r, "policy", "policy")
        redirect = {}
        for key in r.cp["policy"]:
            if key.startswith("redirect."):
                dest = r.get("policy", key, str).strip()
                redirect[r.get("policy", key, lambda _v, k=key: _endpoint(k[9:]))] = dest
        try:
            policy = OutboundPolicy(r.get("policy", "default", lambda v: v.strip().lower(),
                                          "discard"), redirect)
        except ConfigError as exc:
            r.fail(str(exc), "policy", "default")

    sc = "scenario"
    mechanism = r.get(sc, "mechanism", lambda v: Mechanism(v.strip().lower()), required=True)
    env_seed = os.environ.get(SEED_ENV)
    if seed is None and env_seed:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ScenarioError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    if seed is None:
        seed = r.get(sc, "seed", int, required=True)
    rules_path = None
    rules = []
    raw_rules = r.get(sc, "rules")
    if raw_rules is not None:
        rules_path = base_dir / raw_rules.strip()
        if not rules_path.is_file():
            r.fail(f"rules file not found: {rules_path}", sc, "rules")
        try:
            rules = load_ruleset(rules_path)
        except RuleSyntaxError as exc:
            raise ScenarioError(f"rules: {exc}", rules_path, exc.line) from None
    elif mechanism is not Mechanism.DIRECT:
        r.fail("missing required key 'rules'", sc)

    scenario = Scenario(
        name=r.get(sc, "name", str, Path(str(path)).stem),
        mechanism=mechanism,
        seed=seed,
        rules=rules,
        decoys=decoys,
        attackers=attackers,
        topology=topo,
        rules_path=rules_path,
        frontend=r.get(sc, "frontend", str.strip),
        direct_target=r.get(sc, "direct_target", str.strip),
        policy=policy,
        horizon_ms=r.get(sc, "horizon_ms", int, None),
        controller_isn=r.get(sc, "controller_isn", int, None),
        scripts=scripts,
    )
    _fill_defaults(scenario)
    try:
        check_scenario(scenario)
    except ScenarioError as exc:
        # attach a location when the message names a section we know
        for key in ("frontend", "direct_target"):
            if key in str(exc):
                r.fail(str(exc), sc, key)
        raise ScenarioError(str(exc), path) from None
    return scenario


def _fill_defaults(sc: Scenario):
    names = [d.name for d in sc.decoys]
    if sc.mechanism is Mechanism.M2 and sc.frontend is None:
        mihs = [d.name for d in sc.decoys if d.decoy_class is not DecoyClass.HIH]
        sc.frontend = mihs[0] if mihs else (names[0] if names else None)
    if sc.direct_target is None:
        hihs = [d.name for d in sc.decoys if d.decoy_class is DecoyClass.HIH]
        sc.direct_target = hihs[0] if hihs else (names[0] if names else None)


def check_scenario(sc: Scenario):
    if not sc.decoys:
        raise ScenarioError("scenario has no decoys")
    names = [d.name for d in sc.decoys]
    if len(set(names)) != len(names):
        raise ScenarioError("duplicate decoy names")
    ports = {}
    for d in sc.decoys:
        if d.switch_port in ports:
            other = ports[d.switch_port]
            if other.ip == d.ip and other.mac == d.mac:
                raise ScenarioError(f"decoys {other.name} and {d.name} share ip, mac and "
                                    f"switch port {d.switch_port}; they cannot be told apart")
            raise ScenarioError(f"decoys {other.name} and {d.name} share switch port "
                                f"{d.switch_port}")
        ports[d.switch_port] = d
    for a in sc.attackers:
        if a.switch_port in ports:
            raise ScenarioError(f"attacker {a.name} uses switch port {a.switch_port}, "
                                f"already taken by decoy {ports[a.switch_port].name}")
    a_ports = [a.switch_port for a in sc.attackers]
    if len(set(a_ports)) != len(a_ports):
        raise ScenarioError("two attackers on the same switch port")
    if sc.mechanism is Mechanism.M2 and sc.frontend not in names:
        raise ScenarioError(f"frontend {sc.frontend!r} is not a declared decoy")
    if sc.mechanism is Mechanism.DIRECT and sc.direct_target not in names:
        raise ScenarioError(f"direct_target {sc.direct_target!r} is not a declared decoy")


def load_scenario(path, seed=None) -> Scenario:
    path = Path(path)
    if not path.is_file():
        bundled = SCENARIO_DIR / path.name
        if path.parent == Path(".") and bundled.is_file():
            path = bundled
        else:
            raise ScenarioError("scenario file not found", path)
    text = path.read_text(encoding="utf-8")
    return parse_scenario(text, path, path.parent, seed)


# ---------------------------------------------------------------------------
# building and running

def spf_name(decoy):
    return f"spf-{decoy}"


def needs_spf(sc: Scenario, cfg: DecoyConfig) -> bool:
    if cfg.spf is not None:
        return cfg.spf
    if sc.mechanism is Mechanism.M2:
        return cfg.name != sc.frontend
    if sc.mechanism is Mechanism.DIRECT:
        return cfg.name != sc.frontend
    return True


def build_topology(sc: Scenario) -> Topology:
    t = sc.topology
    topo = Topology(controller_channel_latency_us=t.controller_channel_latency_us,
                    controller_processing_us=t.controller_processing_us)
    topo.add_node(FCF_NAME, "FCF")
    for a in sc.attackers:
        topo.add_node(a.name, "attacker")
        topo.connect(a.name, 1, FCF_NAME, a.switch_port, t.link_latency_us)
    for d in sc.decoys:
        topo.add_node(d.name, "decoy")
        if needs_spf(sc, d):
            spf = spf_name(d.name)
            topo.add_node(spf, "SPF")
            topo.connect(FCF_NAME, d.switch_port, spf, 1, t.link_latency_us)
            topo.connect(spf, 2, d.name, 0, t.link_latency_us)
        else:
            topo.connect(FCF_NAME, d.switch_port, d.name, 0, t.link_latency_us)
    return topo


@dataclass
class Run:
    scenario: Scenario
    sim: Simulator
    controller: Controller
    decoys: dict
    switches: dict
    attackers: dict

    @property
    def trace(self):
        return self.sim.trace

    @property
    def fcf(self) -> SwitchNode:
        return self.switches[FCF_NAME]


def build(sc: Scenario, seed=None, horizon_ms=None) -> Run:
    seed = sc.seed if seed is None else seed
    horizon_ms = sc.horizon_ms if horizon_ms is None else horizon_ms
    try:
        topo = build_topology(sc)
        sim = Simulator(topo, None if horizon_ms is None else horizon_ms * MS)
    except TopologyError as exc:
        raise ScenarioError(str(exc)) from None
    switches = {FCF_NAME: SwitchNode(FCF_NAME, Role.FCF)}
    sim.attach(FCF_NAME, SwitchAdapter(sim, switches[FCF_NAME]))
    decoys, sites = {}, {}
    for cfg in sc.decoys:
        decoy = Decoy(cfg, seed)
        decoys[cfg.name] = decoy
        sim.attach(cfg.name, DecoyAdapter(sim, decoy))
        spf = None
        if needs_spf(sc, cfg):
            spf = spf_name(cfg.name)
            switches[spf] = SwitchNode(spf, Role.SPF)
            sim.attach(spf, SwitchAdapter(sim, switches[spf]))
        sites[cfg.name] = DecoySite(cfg, cfg.switch_port, spf)
    t = sc.topology
    try:
        controller = init_controller(
            sim, sc.rules, sites,
            mechanism=sc.mechanism, fcf=FCF_NAME,
            attacker_ports={a.switch_port: a.name for a in sc.attackers},
            seed=seed, frontend=sc.frontend, direct_target=sc.direct_target,
            policy=sc.policy, handshake_timeout_ms=t.handshake_timeout_us / MS,
            decision_delay_ms=t.decision_delay_us / MS,
            flow_idle_timeout_ms=None if t.flow_idle_timeout_us is None
            else t.flow_idle_timeout_us / MS,
            isn=sc.controller_isn)
    except ConfigError as exc:
        raise ScenarioError(str(exc)) from None
    arp = {}
    for cfg in sc.decoys:
        arp.setdefault(cfg.ip, cfg.mac)
    hosts = {a.name: attacker_drive(sim, a, seed, arp) for a in sc.attackers}
    return Run(sc, sim, controller, decoys, switches, hosts)


def run(sc: Scenario, seed=None, horizon_ms=None) -> Run:
    r = build(sc, seed, horizon_ms)
    r.sim.run()
    return r
