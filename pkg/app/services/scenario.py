"""
Scenario files: services with their mainline entry points, timed interrupt
raises, register mutations and firmware epilogues, executed by the
priority-level scheduler.

    service <id> wasm=<path> mode=<mode> [trust=<trust>] [entry=<export>] [setup=<export>]
    at <step> raise <interrupt-label>
    at <step> set-register <register-label> <hex u32>
    firmware <interrupt-label> cost=<steps>

Pure Python module — no FastAPI imports.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from app.services.access import AccessMode, TrustMode, parse_mode, parse_trust
from app.services.errors import ScenarioError
from app.services.interrupts import TraceReport
from app.services.ledger import CostModel
from app.services.platform import PlatformDescription
from app.services.runtime import Machine

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServiceDecl:
    service_id: str
    wasm_path: str
    mode: AccessMode
    trust: TrustMode
    entry: Optional[str] = None
    setup: Optional[str] = None


@dataclass(frozen=True)
class TimedEvent:
    at_step: int
    action: str  # raise | set-register
    label: str
    value: int = 0


@dataclass
class Scenario:
    services: List[ServiceDecl] = field(default_factory=list)
    events: List[TimedEvent] = field(default_factory=list)
    firmware: List[Tuple[str, int]] = field(default_factory=list)
    base_dir: str = "."


def _fields(tokens: List[str], lineno: int) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for token in tokens:
        if "=" not in token:
            raise ScenarioError(f"Line {lineno}: expected key=value, got '{token}'")
        key, value = token.split("=", 1)
        out[key] = value
    return out


def _int(text: str, lineno: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ScenarioError(f"Line {lineno}: '{text}' is not a number")


def parse_scenario(text: str, base_dir: str = ".") -> Scenario:
    scenario = Scenario(base_dir=base_dir)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()

        if tokens[0] == "service":
            if len(tokens) < 2:
                raise ScenarioError(f"Line {lineno}: service needs an id")
            kv = _fields(tokens[2:], lineno)
            unknown = set(kv) - {"wasm", "mode", "trust", "entry", "setup"}
            if unknown:
                raise ScenarioError(f"Line {lineno}: unknown service keys {sorted(unknown)}")
            if "wasm" not in kv or "mode" not in kv:
                raise ScenarioError(f"Line {lineno}: service needs wasm= and mode=")
            if tokens[1] in seen:
                raise ScenarioError(f"Line {lineno}: duplicate service '{tokens[1]}'")
            seen.add(tokens[1])
            try:
                mode = parse_mode(kv["mode"])
                trust = parse_trust(kv.get("trust", "trusted"))
            except ValueError as e:
                raise ScenarioError(f"Line {lineno}: {e}")
            scenario.services.append(
                ServiceDecl(tokens[1], kv["wasm"], mode, trust, kv.get("entry"), kv.get("setup"))
            )

        elif tokens[0] == "at":
            if len(tokens) < 4:
                raise ScenarioError(f"Line {lineno}: expected 'at <step> <action> <label> ...'")
            step = _int(tokens[1], lineno)
            if step < 0:
                raise ScenarioError(f"Line {lineno}: step must not be negative")
            action = tokens[2]
            if action == "raise" and len(tokens) == 4:
                scenario.events.append(TimedEvent(step, action, tokens[3]))
            elif action == "set-register" and len(tokens) == 5:
                scenario.events.append(TimedEvent(step, action, tokens[3], _int(tokens[4], lineno)))
            else:
                raise ScenarioError(f"Line {lineno}: malformed '{action}' event")

        elif tokens[0] == "firmware":
            if len(tokens) != 3:
                raise ScenarioError(f"Line {lineno}: expected 'firmware <label> cost=<steps>'")
            kv = _fields(tokens[2:], lineno)
            if "cost" not in kv:
                raise ScenarioError(f"Line {lineno}: firmware needs cost=")
            scenario.firmware.append((tokens[1], _int(kv["cost"], lineno)))

        else:
            raise ScenarioError(f"Line {lineno}: unknown directive '{tokens[0]}'")
    return scenario


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scenario(f.read(), os.path.dirname(os.path.abspath(path)))


def _read_binary(scenario: Scenario, decl: ServiceDecl) -> bytes:
    path = decl.wasm_path
    if not os.path.isabs(path):
        path = os.path.join(scenario.base_dir, path)
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise ScenarioError(f"Cannot read service binary for '{decl.service_id}': {e}")


def build_machine(
    desc: PlatformDescription,
    scenario: Scenario,
    costs: Optional[CostModel] = None,
    binaries: Optional[Dict[str, bytes]] = None,
) -> Machine:
    """Load every service and queue its mainline and the timed events. `binaries` overrides wasm= paths by service id."""
    machine = Machine(desc, costs)
    for label, cost in scenario.firmware:
        if desc.interrupt(label) is None:
            raise ScenarioError(f"Firmware epilogue for unknown interrupt '{label}'")
        machine.irq_config.add_firmware(label, cost)

    for decl in scenario.services:
        wasm = (binaries or {}).get(decl.service_id)
        if wasm is None:
            wasm = _read_binary(scenario, decl)
        machine.load_service(wasm, decl.service_id, decl.mode, decl.trust)
        if decl.setup:
            machine.invoke(decl.service_id, decl.setup)

    for decl in scenario.services:
        if decl.entry:
            machine.scheduler.add_mainline(decl.service_id, decl.entry)

    for event in scenario.events:
        if event.action == "raise":
            machine.scheduler.raise_label(event.label, event.at_step)
        else:
            if desc.register(event.label) is None:
                raise ScenarioError(f"Unknown register label '{event.label}'")
            machine.scheduler.schedule(
                event.at_step,
                f"set-register {event.label}",
                lambda label=event.label, value=event.value: machine.set_register(label, value),
            )
    return machine


def run_scenario_file(
    desc: PlatformDescription,
    scenario: Scenario,
    costs: Optional[CostModel] = None,
    binaries: Optional[Dict[str, bytes]] = None,
) -> TraceReport:
    machine = build_machine(desc, scenario, costs, binaries)
    report = machine.run()
    logger.info(
        f"Scenario complete | Services: {len(scenario.services)} | Events: {len(scenario.events)} | "
        f"Final step: {report.final_step}"
    )
    return report
