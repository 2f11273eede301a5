"""
Service-side peripheral requirements: the "wasmio.requirements" custom
section layout, embedding into / extraction from module binaries, and the
line-based manifest text read by `wasmio embed`.
Pure Python module — no FastAPI imports.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from app.services.errors import AlreadyEmbedded, DecodeError, EncodeError, ParseError
from app.services.wasm_binary import WasmModule, custom_section, decode_module

logger = logging.getLogger(__name__)

SECTION_NAME = "wasmio.requirements"
MAGIC = b"WIOR"
VERSION = 1
MAX_LABEL_BYTES = 64
DUMMY_FLOOR = 0x80000000
DEFAULT_MAX_COPIES = 8
WIDTHS = (1, 2, 4)


@dataclass(frozen=True)
class RegisterRequirement:
    label: str
    dummy_addr: int
    width: int = 4


@dataclass(frozen=True)
class DeviceRequirement:
    label: str


@dataclass(frozen=True)
class CopyDescriptor:
    source_register_label: str
    # linear-memory offset (RAPI family) or dummy address (MMIO family)
    dest: int
    width: int = 4


@dataclass(frozen=True)
class InterruptSubscription:
    label: str
    priority: int
    # slot in the module's function table
    handler_func_index: int
    copies: Tuple[CopyDescriptor, ...] = ()


@dataclass
class PeripheralRequirements:
    registers: List[RegisterRequirement] = field(default_factory=list)
    devices: List[DeviceRequirement] = field(default_factory=list)
    interrupts: List[InterruptSubscription] = field(default_factory=list)

    def register(self, label: str) -> Optional[RegisterRequirement]:
        for reg in self.registers:
            if reg.label == label:
                return reg
        return None

    @property
    def is_empty(self) -> bool:
        return not (self.registers or self.devices or self.interrupts)


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

def _check_label(label: str, what: str) -> bytes:
    raw = label.encode("utf-8")
    if not raw:
        raise EncodeError(f"{what} label must not be empty")
    if len(raw) > MAX_LABEL_BYTES:
        raise EncodeError(f"{what} label '{label}' is {len(raw)} bytes, limit is {MAX_LABEL_BYTES}")
    return raw


def _check_width(width: int, what: str) -> None:
    if width not in WIDTHS:
        raise EncodeError(f"{what} width {width} is not one of {WIDTHS}")


def check_requirements(req: PeripheralRequirements, max_copies: int = DEFAULT_MAX_COPIES) -> None:
    """Raise EncodeError when `req` violates a requirements invariant."""
    seen = set()
    for reg in req.registers:
        _check_label(reg.label, "Register")
        _check_width(reg.width, f"Register '{reg.label}'")
        if reg.label in seen:
            raise EncodeError(f"Duplicate register label '{reg.label}'")
        seen.add(reg.label)
        if not DUMMY_FLOOR <= reg.dummy_addr <= 0xFFFFFFFF:
            raise EncodeError(
                f"Dummy address 0x{reg.dummy_addr:x} of '{reg.label}' is below 0x{DUMMY_FLOOR:08x}"
            )
        if reg.dummy_addr % reg.width:
            raise EncodeError(f"Dummy address 0x{reg.dummy_addr:x} of '{reg.label}' is not {reg.width}-aligned")

    dummies = [reg.dummy_addr for reg in req.registers]
    if len(set(dummies)) != len(dummies):
        raise EncodeError("Two register requirements share a dummy address")

    devices = set()
    for dev in req.devices:
        _check_label(dev.label, "Device")
        if dev.label in devices:
            raise EncodeError(f"Duplicate device label '{dev.label}'")
        devices.add(dev.label)

    irqs = set()
    for sub in req.interrupts:
        _check_label(sub.label, "Interrupt")
        if sub.label in irqs:
            raise EncodeError(f"Duplicate interrupt label '{sub.label}'")
        irqs.add(sub.label)
        if not 0 <= sub.priority <= 0xFF:
            raise EncodeError(f"Priority {sub.priority} of '{sub.label}' is not a u8")
        if not 0 <= sub.handler_func_index <= 0xFFFFFFFF:
            raise EncodeError(f"Handler index {sub.handler_func_index} of '{sub.label}' is not a u32")
        if len(sub.copies) > max_copies:
            raise EncodeError(
                f"Subscription '{sub.label}' has {len(sub.copies)} copies, limit is {max_copies}"
            )
        for copy in sub.copies:
            _check_width(copy.width, f"Copy of '{copy.source_register_label}'")
            if copy.source_register_label not in seen:
                raise EncodeError(
                    f"Copy source '{copy.source_register_label}' is not a required register"
                )
            if not 0 <= copy.dest <= 0xFFFFFFFF:
                raise EncodeError(f"Copy destination {copy.dest} is not a u32")


# ---------------------------------------------------------------------------
# Binary layout
# ---------------------------------------------------------------------------

def _label_bytes(label: str) -> bytes:
    raw = label.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_requirements(req: PeripheralRequirements, max_copies: int = DEFAULT_MAX_COPIES) -> bytes:
    check_requirements(req, max_copies)
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(req.registers))
    for reg in req.registers:
        out += _label_bytes(reg.label) + struct.pack("<IB", reg.dummy_addr, reg.width)
    out += struct.pack("<H", len(req.devices))
    for dev in req.devices:
        out += _label_bytes(dev.label)
    out += struct.pack("<H", len(req.interrupts))
    for sub in req.interrupts:
        out += _label_bytes(sub.label)
        out += struct.pack("<BIB", sub.priority, sub.handler_func_index, len(sub.copies))
        for copy in sub.copies:
            out += _label_bytes(copy.source_register_label) + struct.pack("<IB", copy.dest, copy.width)
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise DecodeError("Requirements payload truncated", self.pos)
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def label(self) -> str:
        (length,) = self.unpack("<H")
        start = self.pos
        if start + length > len(self.data):
            raise DecodeError("Requirements payload truncated", start)
        self.pos += length
        try:
            return self.data[start:self.pos].decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("Label is not valid UTF-8", start)


def decode_requirements(data: bytes) -> PeripheralRequirements:
    cursor = _Cursor(bytes(data))
    if cursor.data[:4] != MAGIC:
        raise DecodeError("Bad requirements magic", 0)
    cursor.pos = 4
    (version,) = cursor.unpack("<H")
    if version != VERSION:
        raise DecodeError(f"Unsupported requirements version {version}", 4)

    req = PeripheralRequirements()
    (count,) = cursor.unpack("<H")
    for _ in range(count):
        label = cursor.label()
        dummy, width = cursor.unpack("<IB")
        req.registers.append(RegisterRequirement(label, dummy, width))
    (count,) = cursor.unpack("<H")
    for _ in range(count):
        req.devices.append(DeviceRequirement(cursor.label()))
    (count,) = cursor.unpack("<H")
    for _ in range(count):
        label = cursor.label()
        priority, handler, n_copies = cursor.unpack("<BIB")
        copies = []
        for _ in range(n_copies):
            source = cursor.label()
            dest, width = cursor.unpack("<IB")
            copies.append(CopyDescriptor(source, dest, width))
        req.interrupts.append(InterruptSubscription(label, priority, handler, tuple(copies)))
    if cursor.pos != len(cursor.data):
        raise DecodeError("Trailing bytes after requirements", cursor.pos)

    try:
        check_requirements(req, max_copies=0xFF)
    except EncodeError as e:
        raise DecodeError(f"Invalid requirements: {str(e)}", len(cursor.data))
    return req


# ---------------------------------------------------------------------------
# Module embedding
# ---------------------------------------------------------------------------

def embed_requirements(wasm: bytes, req: PeripheralRequirements, max_copies: int = DEFAULT_MAX_COPIES) -> bytes:
    """Append a "wasmio.requirements" custom section; every other byte stays as it was."""
    module = decode_module(wasm)
    if SECTION_NAME in module.custom_sections:
        raise AlreadyEmbedded(f"Module already carries a '{SECTION_NAME}' section")
    payload = encode_requirements(req, max_copies)
    logger.info(
        f"Requirements embedded | Registers: {len(req.registers)} | "
        f"Devices: {len(req.devices)} | Interrupts: {len(req.interrupts)}"
    )
    return bytes(wasm) + custom_section(SECTION_NAME, payload)


def extract_requirements(module: WasmModule) -> Optional[PeripheralRequirements]:
    """Decode the requirements section; None when the module carries none."""
    payload = module.custom_sections.get(SECTION_NAME)
    if payload is None:
        return None
    return decode_requirements(payload)


# ---------------------------------------------------------------------------
# Manifest text
# ---------------------------------------------------------------------------

def _keyvalues(tokens: List[str], allowed: Tuple[str, ...], lineno: int) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for token in tokens:
        if "=" not in token:
            raise ParseError(f"Expected key=value, got '{token}'", lineno)
        key, value = token.split("=", 1)
        if key not in allowed:
            raise ParseError(f"Unknown key '{key}'", lineno)
        if key in values:
            raise ParseError(f"Duplicate key '{key}'", lineno)
        values[key] = value
    missing = [k for k in allowed if k not in values]
    if missing:
        raise ParseError(f"Missing key(s): {', '.join(missing)}", lineno)
    return values


def _number(text: str, lineno: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ParseError(f"'{text}' is not a number", lineno)


def parse_manifest(text: str, max_copies: int = DEFAULT_MAX_COPIES) -> PeripheralRequirements:
    """
    Parse the manifest dialect:
        require-register <label> dummy=<hex u32> width=<1|2|4>
        require-device <label>
        subscribe-interrupt <label> priority=<u8> handler=<u32>
        copy <interrupt-label> <source-register-label> dest=<hex u32> width=<1|2|4>
    """
    req = PeripheralRequirements()
    subs: Dict[str, dict] = {}
    order: List[str] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        directive = tokens[0]

        if directive == "require-register":
            if len(tokens) < 2:
                raise ParseError("require-register needs a label", lineno)
            kv = _keyvalues(tokens[2:], ("dummy", "width"), lineno)
            if req.register(tokens[1]) is not None:
                raise ParseError(f"Duplicate register label '{tokens[1]}'", lineno)
            req.registers.append(RegisterRequirement(
                tokens[1], _number(kv["dummy"], lineno), _number(kv["width"], lineno)
            ))
        elif directive == "require-device":
            if len(tokens) != 2:
                raise ParseError("require-device takes exactly one label", lineno)
            req.devices.append(DeviceRequirement(tokens[1]))
        elif directive == "subscribe-interrupt":
            if len(tokens) < 2:
                raise ParseError("subscribe-interrupt needs a label", lineno)
            kv = _keyvalues(tokens[2:], ("priority", "handler"), lineno)
            if tokens[1] in subs:
                raise ParseError(f"Duplicate interrupt label '{tokens[1]}'", lineno)
            subs[tokens[1]] = {
                "priority": _number(kv["priority"], lineno),
                "handler": _number(kv["handler"], lineno),
                "copies": [],
            }
            order.append(tokens[1])
        elif directive == "copy":
            if len(tokens) < 3:
                raise ParseError("copy needs an interrupt label and a source register label", lineno)
            if tokens[1] not in subs:
                raise ParseError(f"copy refers to unknown subscription '{tokens[1]}'", lineno)
            kv = _keyvalues(tokens[3:], ("dest", "width"), lineno)
            subs[tokens[1]]["copies"].append(CopyDescriptor(
                tokens[2], _number(kv["dest"], lineno), _number(kv["width"], lineno)
            ))
        else:
            raise ParseError(f"Unknown directive '{directive}'", lineno)

    for label in order:
        sub = subs[label]
        req.interrupts.append(InterruptSubscription(
            label, sub["priority"], sub["handler"], tuple(sub["copies"])
        ))

    try:
        check_requirements(req, max_copies)
    except EncodeError as e:
        raise ParseError(str(e), 0)
    return req
