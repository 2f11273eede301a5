"""
WebAssembly binary format for the i32-only subset the runtime executes.

decode_module() turns a binary into a WasmModule, emit_module() builds a
binary from a ModuleSpec (used to generate every service in the repo).
Instructions are plain tuples: (name, *immediates).
Pure Python module — no FastAPI imports.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from app.services.errors import DecodeError, SpecError

logger = logging.getLogger(__name__)

WASM_MAGIC = b"\x00asm"
WASM_VERSION = 1

I32 = "i32"
_VALTYPES = {0x7F: "i32", 0x7E: "i64", 0x7D: "f32", 0x7C: "f64"}
_VALTYPE_CODES = {name: code for code, name in _VALTYPES.items()}

SECTION_CUSTOM = 0
SECTION_TYPE = 1
SECTION_IMPORT = 2
SECTION_FUNCTION = 3
SECTION_TABLE = 4
SECTION_MEMORY = 5
SECTION_GLOBAL = 6
SECTION_EXPORT = 7
SECTION_ELEMENT = 9
SECTION_CODE = 10
SECTION_DATA = 11

_SUPPORTED_SECTIONS = {
    SECTION_CUSTOM, SECTION_TYPE, SECTION_IMPORT, SECTION_FUNCTION, SECTION_TABLE,
    SECTION_MEMORY, SECTION_GLOBAL, SECTION_EXPORT, SECTION_ELEMENT, SECTION_CODE,
    SECTION_DATA,
}

# opcode -> (name, immediate kinds)
OPCODES: Dict[int, Tuple[str, Tuple[str, ...]]] = {
    0x00: ("unreachable", ()),
    0x01: ("nop", ()),
    0x02: ("block", ("blocktype",)),
    0x03: ("loop", ("blocktype",)),
    0x04: ("if", ("blocktype",)),
    0x05: ("else", ()),
    0x0B: ("end", ()),
    0x0C: ("br", ("u32",)),
    0x0D: ("br_if", ("u32",)),
    0x0F: ("return", ()),
    0x10: ("call", ("u32",)),
    0x11: ("call_indirect", ("u32", "zero")),
    0x1A: ("drop", ()),
    0x1B: ("select", ()),
    0x20: ("local.get", ("u32",)),
    0x21: ("local.set", ("u32",)),
    0x22: ("local.tee", ("u32",)),
    0x23: ("global.get", ("u32",)),
    0x24: ("global.set", ("u32",)),
    0x28: ("i32.load", ("u32", "u32")),
    0x2C: ("i32.load8_s", ("u32", "u32")),
    0x2D: ("i32.load8_u", ("u32", "u32")),
    0x2E: ("i32.load16_s", ("u32", "u32")),
    0x2F: ("i32.load16_u", ("u32", "u32")),
    0x36: ("i32.store", ("u32", "u32")),
    0x3A: ("i32.store8", ("u32", "u32")),
    0x3B: ("i32.store16", ("u32", "u32")),
    0x41: ("i32.const", ("s32",)),
    0x45: ("i32.eqz", ()),
    0x46: ("i32.eq", ()),
    0x47: ("i32.ne", ()),
    0x48: ("i32.lt_s", ()),
    0x49: ("i32.lt_u", ()),
    0x4A: ("i32.gt_s", ()),
    0x4B: ("i32.gt_u", ()),
    0x4C: ("i32.le_s", ()),
    0x4D: ("i32.le_u", ()),
    0x4E: ("i32.ge_s", ()),
    0x4F: ("i32.ge_u", ()),
    0x67: ("i32.clz", ()),
    0x68: ("i32.ctz", ()),
    0x69: ("i32.popcnt", ()),
    0x6A: ("i32.add", ()),
    0x6B: ("i32.sub", ()),
    0x6C: ("i32.mul", ()),
    0x6D: ("i32.div_s", ()),
    0x6E: ("i32.div_u", ()),
    0x6F: ("i32.rem_s", ()),
    0x70: ("i32.rem_u", ()),
    0x71: ("i32.and", ()),
    0x72: ("i32.or", ()),
    0x73: ("i32.xor", ()),
    0x74: ("i32.shl", ()),
    0x75: ("i32.shr_s", ()),
    0x76: ("i32.shr_u", ()),
    0x77: ("i32.rotl", ()),
    0x78: ("i32.rotr", ()),
}
OPCODE_BY_NAME: Dict[str, int] = {name: code for code, (name, _) in OPCODES.items()}

LOAD_WIDTHS = {
    "i32.load": (4, False), "i32.load8_s": (1, True), "i32.load8_u": (1, False),
    "i32.load16_s": (2, True), "i32.load16_u": (2, False),
}
STORE_WIDTHS = {"i32.store": 4, "i32.store8": 1, "i32.store16": 2}


# ---------------------------------------------------------------------------
# Module structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FuncType:
    params: Tuple[str, ...] = ()
    results: Tuple[str, ...] = ()


@dataclass
class ImportDecl:
    module_name: str
    field_name: str
    type_index: int
    signature: FuncType


@dataclass
class FunctionBody:
    type_index: int
    locals: Tuple[str, ...]
    code: List[tuple]
    # byte offset of every instruction, for traps and validation errors
    offsets: List[int] = field(default_factory=list, compare=False, repr=False)


@dataclass(frozen=True)
class GlobalDecl:
    valtype: str = I32
    mutable: bool = True
    init: int = 0


@dataclass(frozen=True)
class DataSegment:
    offset: int
    data: bytes


@dataclass
class WasmModule:
    types: List[FuncType] = field(default_factory=list)
    imports: List[ImportDecl] = field(default_factory=list)
    functions: List[FunctionBody] = field(default_factory=list)
    memory_decl: Optional[Tuple[int, Optional[int]]] = None
    globals: List[GlobalDecl] = field(default_factory=list)
    exports: Dict[str, int] = field(default_factory=dict)
    function_table: List[Optional[int]] = field(default_factory=list)
    data: List[DataSegment] = field(default_factory=list)
    custom_sections: Dict[str, bytes] = field(default_factory=dict)
    other_exports: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    table_decl: Optional[Tuple[int, Optional[int]]] = None

    @property
    def num_imported_functions(self) -> int:
        return len(self.imports)

    @property
    def function_count(self) -> int:
        return len(self.imports) + len(self.functions)

    def func_type(self, func_index: int) -> FuncType:
        if func_index < len(self.imports):
            return self.imports[func_index].signature
        return self.types[self.functions[func_index - len(self.imports)].type_index]

    def to_spec(self) -> "ModuleSpec":
        """Convert back to the builder form; inverse of emit_module on its image."""
        functions = []
        for body in self.functions:
            ftype = self.types[body.type_index]
            code = [
                ("call_indirect", self.types[ins[1]]) if ins[0] == "call_indirect" else ins
                for ins in body.code
            ]
            functions.append(FunctionSpec(ftype.params, ftype.results, body.locals, code))
        return ModuleSpec(
            imports=[
                ImportSpec(i.module_name, i.field_name, i.signature.params, i.signature.results)
                for i in self.imports
            ],
            functions=functions,
            exports=dict(self.exports),
            memory=self.memory_decl,
            globals=list(self.globals),
            table=list(self.function_table),
            data=list(self.data),
            custom_sections=dict(self.custom_sections),
        )


@dataclass
class ImportSpec:
    module: str
    name: str
    params: Tuple[str, ...] = ()
    results: Tuple[str, ...] = ()


@dataclass
class FunctionSpec:
    params: Tuple[str, ...] = ()
    results: Tuple[str, ...] = ()
    locals: Tuple[str, ...] = ()
    # instruction tuples, without the closing `end` of the function
    body: List[tuple] = field(default_factory=list)


@dataclass
class ModuleSpec:
    imports: List[ImportSpec] = field(default_factory=list)
    functions: List[FunctionSpec] = field(default_factory=list)
    exports: Dict[str, int] = field(default_factory=dict)
    memory: Optional[Tuple[int, Optional[int]]] = None
    globals: List[GlobalDecl] = field(default_factory=list)
    table: List[Optional[int]] = field(default_factory=list)
    data: List[DataSegment] = field(default_factory=list)
    custom_sections: Dict[str, bytes] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# LEB128
# ---------------------------------------------------------------------------

def encode_u32(value: int) -> bytes:
    if value < 0 or value > 0xFFFFFFFF:
        raise SpecError(f"Value {value} does not fit an unsigned 32-bit LEB128")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def encode_s32(value: int) -> bytes:
    if value >= 0x80000000:
        value -= 1 << 32
    if value < -0x80000000 or value > 0x7FFFFFFF:
        raise SpecError(f"Value {value} does not fit a signed 32-bit LEB128")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        done = (value == 0 and not byte & 0x40) or (value == -1 and byte & 0x40)
        out.append(byte if done else byte | 0x80)
        if done:
            return bytes(out)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0, end: Optional[int] = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    @property
    def at_end(self) -> bool:
        return self.pos >= self.end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise DecodeError("Unexpected end of data", self.pos)
        value = self.data[self.pos]
        self.pos += 1
        return value

    def raw(self, count: int) -> bytes:
        if self.pos + count > self.end:
            raise DecodeError(f"Unexpected end of data reading {count} bytes", self.pos)
        chunk = bytes(self.data[self.pos:self.pos + count])
        self.pos += count
        return chunk

    def u32(self) -> int:
        start = self.pos
        result = shift = 0
        for i in range(5):
            byte = self.byte()
            result |= (byte & 0x7F) << shift
            if not byte & 0x80:
                if i == 4 and byte & 0x70:
                    raise DecodeError("Malformed LEB128: integer too large", start)
                return result
            shift += 7
        raise DecodeError("Malformed LEB128: integer representation too long", start)

    def s32(self) -> int:
        start = self.pos
        result = shift = 0
        for i in range(5):
            byte = self.byte()
            result |= (byte & 0x7F) << shift
            shift += 7
            if not byte & 0x80:
                if i == 4:
                    # remaining bits must be a sign extension of bit 31
                    high = byte & 0x78
                    if high not in (0x00, 0x78):
                        raise DecodeError("Malformed LEB128: integer too large", start)
                if byte & 0x40:
                    result -= 1 << shift
                result = (result + (1 << 31)) % (1 << 32) - (1 << 31)
                return result
        raise DecodeError("Malformed LEB128: integer representation too long", start)

    def name(self) -> str:
        start = self.pos
        raw = self.raw(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("Name is not valid UTF-8", start)

    def valtype(self) -> str:
        start = self.pos
        code = self.byte()
        if code not in _VALTYPES:
            raise DecodeError(f"Unknown value type 0x{code:02x}", start)
        return _VALTYPES[code]


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_module(data: bytes) -> WasmModule:
    """
    Decode a binary module restricted to the supported sections and opcodes.
    Raises DecodeError with the offending byte offset.
    """
    if len(data) < 8 or data[:4] != WASM_MAGIC:
        raise DecodeError("Bad magic: not a WebAssembly binary", 0)
    version = struct.unpack("<I", data[4:8])[0]
    if version != WASM_VERSION:
        raise DecodeError(f"Unsupported binary version {version}", 4)

    module = WasmModule()
    function_types: List[int] = []
    reader = _Reader(data, 8)
    last_id = 0

    while not reader.at_end:
        section_start = reader.pos
        section_id = reader.byte()
        size = reader.u32()
        body_start = reader.pos
        if body_start + size > len(data):
            raise DecodeError("Section extends past end of data", section_start)
        if section_id not in _SUPPORTED_SECTIONS:
            raise DecodeError(f"Unknown or unsupported section id {section_id}", section_start)
        if section_id != SECTION_CUSTOM:
            if section_id <= last_id:
                raise DecodeError(f"Section id {section_id} out of order or duplicated", section_start)
            last_id = section_id

        sec = _Reader(data, body_start, body_start + size)
        if section_id == SECTION_CUSTOM:
            name = sec.name()
            if name not in module.custom_sections:
                module.custom_sections[name] = sec.raw(sec.end - sec.pos)
            else:
                logger.warning(f"Duplicate custom section ignored: {name} | Offset: {section_start}")
            sec.pos = sec.end
        elif section_id == SECTION_TYPE:
            module.types = [_decode_functype(sec) for _ in range(sec.u32())]
        elif section_id == SECTION_IMPORT:
            module.imports = [_decode_import(sec, module) for _ in range(sec.u32())]
        elif section_id == SECTION_FUNCTION:
            function_types = [_decode_type_index(sec, module) for _ in range(sec.u32())]
        elif section_id == SECTION_TABLE:
            _decode_table(sec, module)
        elif section_id == SECTION_MEMORY:
            count_at = sec.pos
            count = sec.u32()
            if count > 1:
                raise DecodeError("At most one memory is allowed", count_at)
            if count == 1:
                module.memory_decl = _decode_limits(sec)
        elif section_id == SECTION_GLOBAL:
            module.globals = [_decode_global(sec) for _ in range(sec.u32())]
        elif section_id == SECTION_EXPORT:
            _decode_exports(sec, module)
        elif section_id == SECTION_ELEMENT:
            _decode_elements(sec, module)
        elif section_id == SECTION_CODE:
            count_at = sec.pos
            count = sec.u32()
            if count != len(function_types):
                raise DecodeError(
                    f"Code section has {count} bodies but function section declares {len(function_types)}",
                    count_at,
                )
            module.functions = [_decode_body(sec, type_index) for type_index in function_types]
        elif section_id == SECTION_DATA:
            module.data = [_decode_data(sec) for _ in range(sec.u32())]

        if sec.pos != sec.end:
            raise DecodeError(f"Section {section_id} size mismatch", sec.pos)
        reader.pos = body_start + size

    if function_types and not module.functions:
        raise DecodeError("Function section without code section", len(data))
    return module


def _decode_functype(sec: _Reader) -> FuncType:
    form_at = sec.pos
    if sec.byte() != 0x60:
        raise DecodeError("Expected function type form 0x60", form_at)
    params = tuple(sec.valtype() for _ in range(sec.u32()))
    results = tuple(sec.valtype() for _ in range(sec.u32()))
    return FuncType(params, results)


def _decode_type_index(sec: _Reader, module: WasmModule) -> int:
    at = sec.pos
    index = sec.u32()
    if index >= len(module.types):
        raise DecodeError(f"Type index {index} out of range", at)
    return index


def _decode_import(sec: _Reader, module: WasmModule) -> ImportDecl:
    module_name = sec.name()
    field_name = sec.name()
    kind_at = sec.pos
    kind = sec.byte()
    if kind != 0:
        raise DecodeError(f"Only function imports are supported (kind {kind})", kind_at)
    type_index = _decode_type_index(sec, module)
    return ImportDecl(module_name, field_name, type_index, module.types[type_index])


def _decode_limits(sec: _Reader) -> Tuple[int, Optional[int]]:
    flag_at = sec.pos
    flag = sec.byte()
    if flag == 0:
        return (sec.u32(), None)
    if flag == 1:
        return (sec.u32(), sec.u32())
    raise DecodeError(f"Bad limits flag {flag}", flag_at)


def _decode_table(sec: _Reader, module: WasmModule) -> None:
    count_at = sec.pos
    count = sec.u32()
    if count > 1:
        raise DecodeError("At most one table is allowed", count_at)
    if count == 1:
        elem_at = sec.pos
        if sec.byte() != 0x70:
            raise DecodeError("Table element type must be funcref", elem_at)
        module.table_decl = _decode_limits(sec)
        module.function_table = [None] * module.table_decl[0]


def _decode_const_expr(sec: _Reader) -> int:
    at = sec.pos
    if sec.byte() != 0x41:
        raise DecodeError("Only i32.const initializer expressions are supported", at)
    value = sec.s32()
    end_at = sec.pos
    if sec.byte() != 0x0B:
        raise DecodeError("Initializer expression must end after one instruction", end_at)
    return value


def _decode_global(sec: _Reader) -> GlobalDecl:
    valtype = sec.valtype()
    mut_at = sec.pos
    mut = sec.byte()
    if mut not in (0, 1):
        raise DecodeError(f"Bad global mutability {mut}", mut_at)
    return GlobalDecl(valtype, bool(mut), _decode_const_expr(sec))


def _decode_exports(sec: _Reader, module: WasmModule) -> None:
    for _ in range(sec.u32()):
        name = sec.name()
        kind_at = sec.pos
        kind = sec.byte()
        index = sec.u32()
        if kind > 3:
            raise DecodeError(f"Unknown export kind {kind}", kind_at)
        if name in module.exports or name in module.other_exports:
            raise DecodeError(f"Duplicate export name '{name}'", kind_at)
        if kind == 0:
            module.exports[name] = index
        else:
            module.other_exports[name] = (kind, index)


def _decode_elements(sec: _Reader, module: WasmModule) -> None:
    for _ in range(sec.u32()):
        table_at = sec.pos
        if sec.u32() != 0:
            raise DecodeError("Element segment must target table 0", table_at)
        offset = _decode_const_expr(sec)
        indices = [sec.u32() for _ in range(sec.u32())]
        if offset < 0 or offset + len(indices) > len(module.function_table):
            raise DecodeError("Element segment does not fit the table", table_at)
        module.function_table[offset:offset + len(indices)] = indices


def _decode_data(sec: _Reader) -> DataSegment:
    mem_at = sec.pos
    if sec.u32() != 0:
        raise DecodeError("Data segment must target memory 0", mem_at)
    offset = _decode_const_expr(sec)
    return DataSegment(offset, sec.raw(sec.u32()))


def _decode_body(sec: _Reader, type_index: int) -> FunctionBody:
    size = sec.u32()
    body = _Reader(sec.data, sec.pos, sec.pos + size)
    if body.end > sec.end:
        raise DecodeError("Function body extends past code section", sec.pos)
    locals_: List[str] = []
    for _ in range(body.u32()):
        count_at = body.pos
        count = body.u32()
        valtype = body.valtype()
        if len(locals_) + count > 50000:
            raise DecodeError("Too many locals", count_at)
        locals_.extend([valtype] * count)

    code: List[tuple] = []
    offsets: List[int] = []
    depth = 0
    while True:
        at = body.pos
        opcode = body.byte()
        if opcode not in OPCODES:
            raise DecodeError(f"Unsupported opcode 0x{opcode:02x}", at)
        name, kinds = OPCODES[opcode]
        if name == "end":
            if depth == 0:
                break
            depth -= 1
        elif name in ("block", "loop", "if"):
            depth += 1
        code.append((name, *(_decode_immediate(body, kind) for kind in kinds if kind != "zero")))
        if "zero" in kinds:
            zero_at = body.pos
            if body.byte() != 0:
                raise DecodeError("call_indirect reserved byte must be zero", zero_at)
        offsets.append(at)

    if body.pos != body.end:
        raise DecodeError("Function body has trailing bytes after end", body.pos)
    sec.pos = body.end
    return FunctionBody(type_index, tuple(locals_), code, offsets)


def _decode_immediate(body: _Reader, kind: str):
    if kind == "u32":
        return body.u32()
    if kind == "s32":
        return body.s32()
    if kind == "blocktype":
        at = body.pos
        code = body.byte()
        if code == 0x40:
            return None
        if code in _VALTYPES:
            return _VALTYPES[code]
        raise DecodeError(f"Unsupported block type 0x{code:02x}", at)
    raise DecodeError(f"Unknown immediate kind {kind}", body.pos)


# ---------------------------------------------------------------------------
# Emitting
# ---------------------------------------------------------------------------

def _vec(items: List[bytes]) -> bytes:
    return encode_u32(len(items)) + b"".join(items)


def _name(text: str) -> bytes:
    raw = text.encode("utf-8")
    return encode_u32(len(raw)) + raw


def _section(section_id: int, payload: bytes) -> bytes:
    return bytes([section_id]) + encode_u32(len(payload)) + payload


def custom_section(name: str, payload: bytes) -> bytes:
    """Encode one complete custom section (id 0)."""
    return _section(SECTION_CUSTOM, _name(name) + payload)


def _valtype(name: str) -> bytes:
    if name not in _VALTYPE_CODES:
        raise SpecError(f"Unknown value type '{name}'")
    return bytes([_VALTYPE_CODES[name]])


def _functype(ftype: FuncType) -> bytes:
    return (
        b"\x60"
        + _vec([_valtype(t) for t in ftype.params])
        + _vec([_valtype(t) for t in ftype.results])
    )


def _limits(limits: Tuple[int, Optional[int]]) -> bytes:
    minimum, maximum = limits
    if maximum is None:
        return b"\x00" + encode_u32(minimum)
    return b"\x01" + encode_u32(minimum) + encode_u32(maximum)


def _const_expr(value: int) -> bytes:
    return b"\x41" + encode_s32(value) + b"\x0b"


def _encode_instruction(ins: tuple, intern) -> bytes:
    if not ins or ins[0] not in OPCODE_BY_NAME:
        raise SpecError(f"Unsupported instruction {ins!r}")
    name = ins[0]
    if name == "end" or name == "else":
        return bytes([OPCODE_BY_NAME[name]])
    opcode = OPCODE_BY_NAME[name]
    kinds = [k for k in OPCODES[opcode][1] if k != "zero"]
    args = ins[1:]
    if name in ("block", "loop", "if") and not args:
        args = (None,)
    if len(args) != len(kinds):
        raise SpecError(f"Instruction {name} expects {len(kinds)} immediates, got {len(args)}")
    out = bytearray([opcode])
    for kind, arg in zip(kinds, args):
        if kind == "blocktype":
            out += b"\x40" if arg is None else _valtype(arg)
        elif kind == "s32":
            out += encode_s32(int(arg))
        elif name == "call_indirect":
            out += encode_u32(intern(arg) if isinstance(arg, FuncType) else int(arg))
        else:
            out += encode_u32(int(arg))
    if name == "call_indirect":
        out.append(0)
    return bytes(out)


def _encode_locals(locals_: Tuple[str, ...]) -> bytes:
    groups: List[List] = []
    for valtype in locals_:
        if groups and groups[-1][1] == valtype:
            groups[-1][0] += 1
        else:
            groups.append([1, valtype])
    return _vec([encode_u32(count) + _valtype(t) for count, t in groups])


def emit_module(spec: ModuleSpec) -> bytes:
    """
    Build a binary module from a ModuleSpec.
    Function indices count imports first. decode_module(emit_module(s)).to_spec() == s
    for specs whose i32.const immediates are given in signed form.
    """
    types: List[FuncType] = []

    def intern(ftype: FuncType) -> int:
        if ftype not in types:
            types.append(ftype)
        return types.index(ftype)

    import_entries = []
    for imp in spec.imports:
        index = intern(FuncType(tuple(imp.params), tuple(imp.results)))
        import_entries.append(_name(imp.module) + _name(imp.name) + b"\x00" + encode_u32(index))

    func_type_indices = [
        intern(FuncType(tuple(fn.params), tuple(fn.results))) for fn in spec.functions
    ]
    bodies = []
    for fn in spec.functions:
        code = b"".join(_encode_instruction(ins, intern) for ins in fn.body) + b"\x0b"
        body = _encode_locals(tuple(fn.locals)) + code
        bodies.append(encode_u32(len(body)) + body)

    out = bytearray(WASM_MAGIC + struct.pack("<I", WASM_VERSION))
    if types:
        out += _section(SECTION_TYPE, _vec([_functype(t) for t in types]))
    if import_entries:
        out += _section(SECTION_IMPORT, _vec(import_entries))
    if spec.functions:
        out += _section(SECTION_FUNCTION, _vec([encode_u32(i) for i in func_type_indices]))
    if spec.table:
        size = len(spec.table)
        out += _section(SECTION_TABLE, _vec([b"\x70" + _limits((size, size))]))
    if spec.memory is not None:
        out += _section(SECTION_MEMORY, _vec([_limits(spec.memory)]))
    if spec.globals:
        out += _section(SECTION_GLOBAL, _vec([
            _valtype(g.valtype) + bytes([1 if g.mutable else 0]) + _const_expr(g.init)
            for g in spec.globals
        ]))
    if spec.exports:
        out += _section(SECTION_EXPORT, _vec([
            _name(name) + b"\x00" + encode_u32(index) for name, index in spec.exports.items()
        ]))
    if spec.table:
        if any(index is None for index in spec.table):
            raise SpecError("Table entries must all be function indices")
        out += _section(SECTION_ELEMENT, _vec([
            encode_u32(0) + _const_expr(0) + _vec([encode_u32(i) for i in spec.table])
        ]))
    if spec.functions:
        out += _section(SECTION_CODE, _vec(bodies))
    if spec.data:
        out += _section(SECTION_DATA, _vec([
            encode_u32(0) + _const_expr(seg.offset) + encode_u32(len(seg.data)) + bytes(seg.data)
            for seg in spec.data
        ]))
    for name, payload in spec.custom_sections.items():
        out += custom_section(name, bytes(payload))
    return bytes(out)
