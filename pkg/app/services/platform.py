"""
OEM side of the binding: the platform description file, the per-service
memory access configuration, the interrupt configuration and load-time
matching of service requirements against what the platform exposes.
Pure Python module — no FastAPI imports.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

from app.services.devices import DEVICE_KINDS, MAX_IRQ_LINES, REGISTER_MAPS
from app.services.errors import ConfigError, ParseError, Rejection
from app.services.ledger import CostModel, parse_costs
from app.services.manifest import CopyDescriptor, PeripheralRequirements

logger = logging.getLogger(__name__)

DEFAULT_MAX_REGISTERS = 32

_DEVICE_PARAMS = {"gpio": ("pins",), "spi": ("divider",), "timer": ("compare",)}


@dataclass(frozen=True)
class ExposedRegister:
    label: str
    phys_addr: int
    width: int
    mask: int
    usage_freq: int


@dataclass(frozen=True)
class ExposedDevice:
    label: str
    driver_kind: str
    base: int
    irq_line: Optional[int] = None
    instance_params: Tuple[Tuple[str, int], ...] = ()

    def param(self, name: str, default: int) -> int:
        return dict(self.instance_params).get(name, default)


@dataclass(frozen=True)
class ExposedInterrupt:
    label: str
    line: int
    # (register label, value) written by the system prologue
    clear_action: Optional[Tuple[str, int]] = None


@dataclass
class PlatformDescription:
    registers: List[ExposedRegister] = field(default_factory=list)
    devices: List[ExposedDevice] = field(default_factory=list)
    interrupts: List[ExposedInterrupt] = field(default_factory=list)
    assignments: Dict[str, List[str]] = field(default_factory=dict)
    cpu_model: CostModel = field(default_factory=CostModel)

    def register(self, label: str) -> Optional[ExposedRegister]:
        return next((r for r in self.registers if r.label == label), None)

    def device(self, label: str) -> Optional[ExposedDevice]:
        return next((d for d in self.devices if d.label == label), None)

    def interrupt(self, label: str) -> Optional[ExposedInterrupt]:
        return next((i for i in self.interrupts if i.label == label), None)


# ---------------------------------------------------------------------------
# Platform file
# ---------------------------------------------------------------------------

def _number(text: str, lineno: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(f"'{text}' is not a number", lineno)


def _keyvalues(tokens: Iterable[str], required: Tuple[str, ...], optional: Tuple[str, ...], lineno: int) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for token in tokens:
        if "=" not in token:
            raise ParseError(f"Expected key=value, got '{token}'", lineno)
        key, value = token.split("=", 1)
        if key not in required and key not in optional:
            raise ParseError(f"Unknown key '{key}'", lineno)
        if key in values:
            raise ParseError(f"Duplicate key '{key}'", lineno)
        values[key] = value
    missing = [k for k in required if k not in values]
    if missing:
        raise ParseError(f"Missing key(s): {', '.join(missing)}", lineno)
    return values


def parse_platform(text: str) -> PlatformDescription:
    """
    Parse the platform description:
        register <label> addr=<hex u32> width=<1|2|4> mask=<hex u32> freq=<u32>
        device <label> kind=<gpio|spi|timer> base=<hex u32> [irq=<line>] [pins=|divider=|compare=]
        interrupt <label> line=<u8> [clear=<register-label>:<hex u32>]
        assign <service-id> <label> [<label> ...]
        cost <name>=<u32>
    """
    desc = PlatformDescription()
    cost_lines: List[str] = []
    register_lines: Dict[str, int] = {}
    interrupt_lines: Dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        cost_lines.append(line if line.startswith("cost ") else "")
        if not line:
            continue
        tokens = line.split()
        directive = tokens[0]

        if directive == "cost":
            continue

        if directive == "assign":
            if len(tokens) < 3:
                raise ParseError("assign needs a service id and at least one label", lineno)
            desc.assignments.setdefault(tokens[1], []).extend(tokens[2:])
            continue

        if len(tokens) < 2:
            raise ParseError(f"{directive} needs a label", lineno)
        label = tokens[1]

        if directive == "register":
            kv = _keyvalues(tokens[2:], ("addr", "width", "mask", "freq"), (), lineno)
            if desc.register(label) is not None:
                raise ParseError(f"Duplicate register label '{label}'", lineno)
            reg = ExposedRegister(
                label,
                _number(kv["addr"], lineno),
                _number(kv["width"], lineno),
                _number(kv["mask"], lineno),
                _number(kv["freq"], lineno),
            )
            if reg.width not in (1, 2, 4):
                raise ParseError(f"Register '{label}' width {reg.width} is not 1, 2 or 4", lineno)
            if not 0 <= reg.phys_addr <= 0xFFFFFFFF or reg.phys_addr % reg.width:
                raise ParseError(f"Register '{label}' address 0x{reg.phys_addr:x} is not {reg.width}-aligned", lineno)
            if reg.mask == 0 or reg.mask > 0xFFFFFFFF:
                raise ParseError(f"Register '{label}' mask must be a nonzero u32", lineno)
            if reg.usage_freq < 0:
                raise ParseError(f"Register '{label}' frequency must not be negative", lineno)
            for other in desc.registers:
                if reg.phys_addr < other.phys_addr + other.width and other.phys_addr < reg.phys_addr + reg.width:
                    raise ParseError(f"Register '{label}' overlaps register '{other.label}'", lineno)
            desc.registers.append(reg)
            register_lines[label] = lineno

        elif directive == "device":
            kv = _keyvalues(tokens[2:], ("kind", "base"), ("irq", "pins", "divider", "compare"), lineno)
            if desc.device(label) is not None:
                raise ParseError(f"Duplicate device label '{label}'", lineno)
            kind = kv["kind"]
            if kind not in DEVICE_KINDS:
                raise ParseError(f"Device kind '{kind}' has no simulated driver", lineno)
            params = []
            for key in ("pins", "divider", "compare"):
                if key in kv:
                    if key not in _DEVICE_PARAMS[kind]:
                        raise ParseError(f"Key '{key}' does not apply to {kind} devices", lineno)
                    params.append((key, _number(kv[key], lineno)))
            irq = _number(kv["irq"], lineno) if "irq" in kv else None
            if irq is not None and not 0 <= irq < MAX_IRQ_LINES:
                raise ParseError(f"Interrupt line {irq} does not exist", lineno)
            desc.devices.append(ExposedDevice(label, kind, _number(kv["base"], lineno), irq, tuple(params)))

        elif directive == "interrupt":
            kv = _keyvalues(tokens[2:], ("line",), ("clear",), lineno)
            if desc.interrupt(label) is not None:
                raise ParseError(f"Duplicate interrupt label '{label}'", lineno)
            irq_line = _number(kv["line"], lineno)
            if not 0 <= irq_line < MAX_IRQ_LINES:
                raise ParseError(f"Interrupt line {irq_line} does not exist", lineno)
            clear = None
            if "clear" in kv:
                if ":" not in kv["clear"]:
                    raise ParseError("clear must be <register-label>:<hex u32>", lineno)
                reg_label, value = kv["clear"].split(":", 1)
                clear = (reg_label, _number(value, lineno))
            desc.interrupts.append(ExposedInterrupt(label, irq_line, clear))
            interrupt_lines[label] = lineno

        else:
            raise ParseError(f"Unknown directive '{directive}'", lineno)

    # ---- cross-references ----
    device_registers = {}
    for dev in desc.devices:
        for name, offset in REGISTER_MAPS[dev.driver_kind].items():
            device_registers[dev.base + offset] = (dev.label, name)
    for reg in desc.registers:
        if reg.phys_addr not in device_registers:
            raise ParseError(
                f"Register '{reg.label}' at 0x{reg.phys_addr:08x} is not a register of any declared device",
                register_lines[reg.label],
            )
    for irq in desc.interrupts:
        if irq.clear_action and desc.register(irq.clear_action[0]) is None:
            raise ParseError(
                f"Interrupt '{irq.label}' clears unknown register '{irq.clear_action[0]}'",
                interrupt_lines[irq.label],
            )

    desc.cpu_model = parse_costs("\n".join(cost_lines))
    return desc


# ---------------------------------------------------------------------------
# Memory access configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegisterBinding:
    label: str
    phys_addr: int
    width: int
    mask: int
    usage_freq: int = 0


@dataclass
class ServiceAccess:
    service_id: str
    bindings: List[RegisterBinding] = field(default_factory=list)
    # handle -> device
    devices: List[ExposedDevice] = field(default_factory=list)
    interrupts: Set[str] = field(default_factory=set)

    def binding_index(self, label: str) -> Optional[int]:
        for index, binding in enumerate(self.bindings):
            if binding.label == label:
                return index
        return None


@dataclass
class MemoryAccessConfiguration:
    services: Dict[str, ServiceAccess] = field(default_factory=dict)

    def service(self, service_id: str) -> ServiceAccess:
        return self.services.get(service_id, ServiceAccess(service_id))


def build_access_config(
    desc: PlatformDescription,
    assignments: Optional[Dict[str, Iterable[str]]] = None,
    max_registers: int = DEFAULT_MAX_REGISTERS,
) -> MemoryAccessConfiguration:
    """
    Bind assigned labels to services. Registers and devices are exclusive to
    one service; interrupts may be shared. Bindings are sorted by usage
    frequency descending, ties by label.
    """
    assignments = desc.assignments if assignments is None else assignments
    cfg = MemoryAccessConfiguration()
    owners: Dict[str, str] = {}

    for service_id in sorted(assignments):
        access = ServiceAccess(service_id)
        registers: List[ExposedRegister] = []
        for label in sorted(set(assignments[service_id])):
            reg, dev, irq = desc.register(label), desc.device(label), desc.interrupt(label)
            if reg is None and dev is None and irq is None:
                raise ConfigError(f"Service '{service_id}' is assigned unknown label '{label}'")
            if reg is not None or dev is not None:
                if label in owners and owners[label] != service_id:
                    raise ConfigError(
                        f"'{label}' is assigned to both '{owners[label]}' and '{service_id}'"
                    )
                owners[label] = service_id
            if reg is not None:
                registers.append(reg)
            if dev is not None:
                access.devices.append(dev)
            if irq is not None:
                access.interrupts.add(label)

        if len(registers) > max_registers:
            raise ConfigError(
                f"Service '{service_id}' is assigned {len(registers)} registers, limit is {max_registers}"
            )
        registers.sort(key=lambda r: (-r.usage_freq, r.label))
        access.bindings = [
            RegisterBinding(r.label, r.phys_addr, r.width, r.mask, r.usage_freq) for r in registers
        ]
        cfg.services[service_id] = access

    return cfg


# ---------------------------------------------------------------------------
# Load-time matching
# ---------------------------------------------------------------------------

@dataclass
class ResolvedService:
    service_id: str
    bindings: List[RegisterBinding]
    # dummy address per binding, aligned with `bindings`; None where the
    # service did not require that register
    dummy_table: List[Optional[int]]
    devices: List[ExposedDevice]
    interrupts: Set[str]
    requirements: PeripheralRequirements

    def lookup_dummy(self, addr: int) -> Tuple[Optional[int], int]:
        """Linear scan in binding order: (binding index or None, comparisons made)."""
        for index, dummy in enumerate(self.dummy_table):
            if dummy == addr:
                return index, index + 1
        return None, len(self.dummy_table)


def match_requirements(
    req: PeripheralRequirements,
    cfg: MemoryAccessConfiguration,
    desc: PlatformDescription,
    service_id: str,
) -> ResolvedService:
    """Resolve every requirement or raise a Rejection listing all unresolved ones."""
    access = cfg.service(service_id)
    missing: List[Tuple[str, str, str]] = []
    dummy_table: List[Optional[int]] = [None] * len(access.bindings)

    for reg in req.registers:
        index = access.binding_index(reg.label)
        if index is None:
            missing.append(("register", reg.label, "not exposed to service"))
            continue
        binding = access.bindings[index]
        if binding.width != reg.width:
            missing.append(("register", reg.label, f"width {reg.width} != exposed width {binding.width}"))
            continue
        dummy_table[index] = reg.dummy_addr

    for dev in req.devices:
        if all(d.label != dev.label for d in access.devices):
            missing.append(("device", dev.label, "not exposed to service"))

    for sub in req.interrupts:
        if sub.label not in access.interrupts or desc.interrupt(sub.label) is None:
            missing.append(("interrupt", sub.label, "not exposed to service"))
        for copy in sub.copies:
            problem = copy_problem(copy, access)
            if problem and copy.source_register_label not in [m[1] for m in missing]:
                missing.append(("copy", copy.source_register_label, problem))

    if missing:
        logger.warning(
            f"Service rejected: {service_id} | Missing: "
            + ", ".join(f"{c}:{label}" for c, label, _ in missing)
        )
        raise Rejection(service_id, missing)

    return ResolvedService(
        service_id,
        list(access.bindings),
        dummy_table,
        list(access.devices),
        set(access.interrupts),
        req,
    )


def copy_problem(copy: CopyDescriptor, access: ServiceAccess) -> Optional[str]:
    index = access.binding_index(copy.source_register_label)
    if index is None:
        return "copy source not bound to service"
    if access.bindings[index].width != copy.width:
        return f"copy width {copy.width} != register width {access.bindings[index].width}"
    return None


# ---------------------------------------------------------------------------
# Interrupt configuration
# ---------------------------------------------------------------------------

@dataclass
class Subscription:
    service_id: str
    label: str
    priority: int
    # slot in the service's function table
    table_index: int
    copies: Tuple[CopyDescriptor, ...] = ()
    seq: int = 0


@dataclass(frozen=True)
class FirmwareEpilogue:
    label: str
    cost: int


class InterruptConfig:
    """Exposed interrupts by line, plus every subscription and firmware epilogue."""

    def __init__(self, interrupts: Iterable[ExposedInterrupt] = ()):
        self.exposed: Dict[str, ExposedInterrupt] = {i.label: i for i in interrupts}
        self.subscriptions: List[Subscription] = []
        self.firmware: Dict[str, List[FirmwareEpilogue]] = {}
        self._seq = 0

    def labels_on_line(self, line: int) -> List[str]:
        return [label for label, irq in self.exposed.items() if irq.line == line]

    def subscribe(self, sub: Subscription) -> Subscription:
        """A repeated (service, label) registration replaces the earlier one and takes a new order."""
        self.subscriptions = [
            s for s in self.subscriptions
            if not (s.service_id == sub.service_id and s.label == sub.label)
        ]
        sub.seq = self._seq
        self._seq += 1
        self.subscriptions.append(sub)
        return sub

    def subscribers(self, label: str) -> List[Subscription]:
        subs = [s for s in self.subscriptions if s.label == label]
        return sorted(subs, key=lambda s: (s.priority, s.seq))

    def add_firmware(self, label: str, cost: int) -> None:
        if label not in self.exposed:
            raise ConfigError(f"Firmware epilogue for unknown interrupt '{label}'")
        self.firmware.setdefault(label, []).append(FirmwareEpilogue(label, cost))


def build_interrupt_config(desc: PlatformDescription) -> InterruptConfig:
    return InterruptConfig(desc.interrupts)
