"""
Interpreter for the i32 subset: linear memory, module instances,
per-invocation execution environments and the memory-access hook that lets
failed bounds checks be re-authorized as peripheral I/O.

Execution is resumable at instruction boundaries (ExecutionEnvironment.step)
so the interrupt scheduler can preempt a running flow.
Pure Python module — no FastAPI imports.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from app.services.errors import LinkError, WasmIOError
from app.services.ledger import StepLedger
from app.services.wasm_binary import (
    LOAD_WIDTHS,
    STORE_WIDTHS,
    FuncType,
    ImportDecl,
    WasmModule,
)

logger = logging.getLogger(__name__)

MASK32 = 0xFFFFFFFF
DEFAULT_PAGE_SIZE = 4096
DEFAULT_MAX_FRAMES = 1024


def to_signed(value: int) -> int:
    value &= MASK32
    return value - 0x100000000 if value & 0x80000000 else value


class TrapKind(Enum):
    OutOfBounds = "out_of_bounds"
    UnreachableInstr = "unreachable"
    StackOverflow = "stack_overflow"
    DivByZero = "div_by_zero"
    IntegerOverflow = "integer_overflow"
    BadIndirectCall = "bad_indirect_call"
    HostReject = "host_reject"


class Trap(Exception):
    """Terminates the current invocation only; instance state stays intact."""

    def __init__(self, kind: TrapKind, detail: str, at_function: int = -1, at_offset: int = -1):
        super().__init__(f"{kind.name}: {detail} (function {at_function}, offset {at_offset})")
        self.kind = kind
        self.detail = detail
        self.at_function = at_function
        self.at_offset = at_offset


# ---------------------------------------------------------------------------
# Linear memory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MemoryConfig:
    # overrides the declared initial page count when set
    pages: Optional[int] = None
    page_size: int = DEFAULT_PAGE_SIZE
    conveyor: int = 0


class LinearMemory:
    def __init__(self, size_pages: int, page_size: int = DEFAULT_PAGE_SIZE, conveyor_size: int = 0):
        if page_size <= 0:
            raise ValueError(f"Page size must be positive, got {page_size}")
        if conveyor_size < 0:
            raise ValueError(f"Conveyor size must not be negative, got {conveyor_size}")
        self.page_size = page_size
        self.size_pages = size_pages
        self.conveyor_size = conveyor_size
        self.bytes = bytearray(size_pages * page_size + conveyor_size)

    @property
    def data_size(self) -> int:
        return self.size_pages * self.page_size

    @property
    def limit(self) -> int:
        """Accessible index bound: linear memory plus the conveyor region."""
        return self.data_size + self.conveyor_size

    def in_bounds(self, addr: int, width: int) -> bool:
        return addr + width <= self.limit

    def load(self, addr: int, width: int) -> int:
        return int.from_bytes(self.bytes[addr:addr + width], "little")

    def store(self, addr: int, width: int, value: int) -> None:
        self.bytes[addr:addr + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    def read_bytes(self, addr: int, length: int) -> Optional[bytes]:
        """Copy bytes out of plain linear memory; None when the range is not inside it."""
        if addr < 0 or length < 0 or addr + length > self.data_size:
            return None
        return bytes(self.bytes[addr:addr + length])


# ---------------------------------------------------------------------------
# Host linking
# ---------------------------------------------------------------------------

HostCallable = Callable[..., Optional[int]]


@dataclass
class HostFunction:
    signature: FuncType
    fn: HostCallable


class HostLinker:
    """Host functions by (module, field); each receives the calling environment first."""

    def __init__(self):
        self._functions: Dict[Tuple[str, str], HostFunction] = {}

    def define(self, module: str, name: str, params: int, results: int, fn: HostCallable) -> None:
        self._functions[(module, name)] = HostFunction(
            FuncType(("i32",) * params, ("i32",) * results), fn
        )

    def names(self) -> List[str]:
        return sorted(f"{m}.{n}" for m, n in self._functions)

    def resolve(self, imp: ImportDecl) -> HostFunction:
        key = (imp.module_name, imp.field_name)
        if key not in self._functions:
            raise LinkError(f"Unresolved import {imp.module_name}.{imp.field_name}")
        host = self._functions[key]
        if host.signature != imp.signature:
            raise LinkError(
                f"Import {imp.module_name}.{imp.field_name} signature mismatch: "
                f"module expects {imp.signature}, host provides {host.signature}"
            )
        return host


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------

@dataclass
class _Compiled:
    code: List[tuple]
    offsets: List[int]
    ends: Dict[int, int]
    elses: Dict[int, int]
    else_ends: Dict[int, int]
    n_params: int
    n_locals: int
    n_results: int


def _compile(module: WasmModule, body) -> _Compiled:
    ftype = module.types[body.type_index]
    ends: Dict[int, int] = {}
    elses: Dict[int, int] = {}
    else_ends: Dict[int, int] = {}
    open_blocks: List[int] = []
    for pc, ins in enumerate(body.code):
        op = ins[0]
        if op in ("block", "loop", "if"):
            open_blocks.append(pc)
        elif op == "else":
            elses[open_blocks[-1]] = pc
        elif op == "end":
            start = open_blocks.pop()
            ends[start] = pc
            if start in elses:
                else_ends[elses[start]] = pc
    return _Compiled(
        body.code, body.offsets, ends, elses, else_ends,
        len(ftype.params), len(body.locals), len(ftype.results),
    )


IoHook = Callable[["ModuleInstance", int, int, str, Optional[int]], Optional[int]]


class ModuleInstance:
    def __init__(
        self,
        module: WasmModule,
        memory: LinearMemory,
        host_functions: List[HostFunction],
        service_id: str = "",
        max_frames: int = DEFAULT_MAX_FRAMES,
        ledger: Optional[StepLedger] = None,
    ):
        self.module = module
        self.memory = memory
        self.globals: List[int] = [g.init & MASK32 for g in module.globals]
        self.table: List[Optional[int]] = list(module.function_table)
        self.host_functions = host_functions
        self.service_id = service_id
        self.max_frames = max_frames
        self.ledger = ledger if ledger is not None else StepLedger()
        # set by the access layer; consulted only when the bounds check fails
        self.io_hook: Optional[IoHook] = None
        self._compiled: Dict[int, _Compiled] = {}

    def compiled(self, func_index: int) -> _Compiled:
        if func_index not in self._compiled:
            body = self.module.functions[func_index - self.module.num_imported_functions]
            self._compiled[func_index] = _compile(self.module, body)
        return self._compiled[func_index]

    def recompile(self) -> None:
        self._compiled.clear()

    def export_index(self, name: str) -> int:
        if name not in self.module.exports:
            raise ValueError(f"Module has no exported function '{name}'")
        return self.module.exports[name]


def instantiate(
    module: WasmModule,
    linker: HostLinker,
    mem_cfg: Optional[MemoryConfig] = None,
    service_id: str = "",
    max_frames: int = DEFAULT_MAX_FRAMES,
    ledger: Optional[StepLedger] = None,
) -> ModuleInstance:
    """
    Create a module instance: resolve every import through the linker, allocate
    zeroed memory (plus the conveyor region when configured), apply data segments.
    """
    mem_cfg = mem_cfg or MemoryConfig()
    host_functions = [linker.resolve(imp) for imp in module.imports]

    declared_pages = module.memory_decl[0] if module.memory_decl else 0
    pages = declared_pages if mem_cfg.pages is None else mem_cfg.pages
    memory = LinearMemory(pages, mem_cfg.page_size, mem_cfg.conveyor)
    for segment in module.data:
        if segment.offset < 0 or segment.offset + len(segment.data) > memory.data_size:
            raise LinkError(
                f"Data segment at {segment.offset} (+{len(segment.data)}) does not fit "
                f"{memory.data_size} bytes of linear memory"
            )
        memory.bytes[segment.offset:segment.offset + len(segment.data)] = segment.data

    return ModuleInstance(module, memory, host_functions, service_id, max_frames, ledger)


def mem_access_hook(
    inst: ModuleInstance, addr: int, width: int, kind: str, value: Optional[int] = None
) -> Optional[int]:
    """
    Called by the interpreter exactly when the default bounds check fails.
    Returns the read value (0 for a handled write) or None when unhandled.
    """
    if inst.io_hook is None:
        return None
    return inst.io_hook(inst, addr, width, kind, value)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _sx(value: int) -> int:
    return value - 0x100000000 if value & 0x80000000 else value


def _rotl(a: int, b: int) -> int:
    k = b & 31
    return ((a << k) | (a >> (32 - k))) & MASK32


def _rotr(a: int, b: int) -> int:
    k = b & 31
    return ((a >> k) | (a << (32 - k))) & MASK32


_BINOPS: Dict[str, Callable[[int, int], int]] = {
    "i32.add": lambda a, b: (a + b) & MASK32,
    "i32.sub": lambda a, b: (a - b) & MASK32,
    "i32.mul": lambda a, b: (a * b) & MASK32,
    "i32.and": lambda a, b: a & b,
    "i32.or": lambda a, b: a | b,
    "i32.xor": lambda a, b: a ^ b,
    "i32.shl": lambda a, b: (a << (b & 31)) & MASK32,
    "i32.shr_u": lambda a, b: a >> (b & 31),
    "i32.shr_s": lambda a, b: (_sx(a) >> (b & 31)) & MASK32,
    "i32.rotl": _rotl,
    "i32.rotr": _rotr,
    "i32.eq": lambda a, b: int(a == b),
    "i32.ne": lambda a, b: int(a != b),
    "i32.lt_s": lambda a, b: int(_sx(a) < _sx(b)),
    "i32.lt_u": lambda a, b: int(a < b),
    "i32.gt_s": lambda a, b: int(_sx(a) > _sx(b)),
    "i32.gt_u": lambda a, b: int(a > b),
    "i32.le_s": lambda a, b: int(_sx(a) <= _sx(b)),
    "i32.le_u": lambda a, b: int(a <= b),
    "i32.ge_s": lambda a, b: int(_sx(a) >= _sx(b)),
    "i32.ge_u": lambda a, b: int(a >= b),
}

_UNOPS: Dict[str, Callable[[int], int]] = {
    "i32.eqz": lambda a: int(a == 0),
    "i32.clz": lambda a: 32 - a.bit_length(),
    "i32.ctz": lambda a: 32 if a == 0 else (a & -a).bit_length() - 1,
    "i32.popcnt": lambda a: bin(a).count("1"),
}


class _Frame:
    __slots__ = ("func_index", "fn", "locals", "pc", "labels", "base")

    def __init__(self, func_index: int, fn: _Compiled, locals_: List[int], base: int):
        self.func_index = func_index
        self.fn = fn
        self.locals = locals_
        self.pc = 0
        # (continuation pc, arity, operand height, is_loop)
        self.labels: List[Tuple[int, int, int, bool]] = []
        self.base = base


class ExecutionEnvironment:
    """
    Per-invocation interpreter state: call stack and operand stack.
    Created fresh for every invocation and discarded afterwards.
    """

    def __init__(self, instance: ModuleInstance, ledger: Optional[StepLedger] = None):
        self.instance = instance
        self.ledger = ledger if ledger is not None else instance.ledger
        self.call_stack: List[_Frame] = []
        self.operand_stack: List[int] = []
        self.finished = False
        self._results: List[int] = []
        self._entry_results = 0

    # -- lifecycle -----------------------------------------------------------

    def start(self, func_index: int, args: Sequence[int]) -> None:
        module = self.instance.module
        if func_index >= module.function_count:
            raise ValueError(f"Function index {func_index} does not exist")
        ftype = module.func_type(func_index)
        if len(args) != len(ftype.params):
            raise ValueError(
                f"Function {func_index} expects {len(ftype.params)} arguments, got {len(args)}"
            )
        values = [a & MASK32 for a in args]
        self._entry_results = len(ftype.results)
        if func_index < module.num_imported_functions:
            self.operand_stack.extend(values)
            self._call_host(func_index)
            self._finish()
            return
        self.operand_stack.extend(values)
        self._push_frame(func_index)

    @property
    def results(self) -> List[int]:
        return [to_signed(v) for v in self._results]

    def run(self) -> List[int]:
        while not self.finished:
            self.step()
        return self.results

    def _finish(self) -> None:
        n = self._entry_results
        self._results = self.operand_stack[-n:] if n else []
        self.finished = True

    # -- helpers -------------------------------------------------------------

    def _trap(self, kind: TrapKind, detail: str) -> Trap:
        if self.call_stack:
            frame = self.call_stack[-1]
            offsets = frame.fn.offsets
            at = offsets[frame.pc] if frame.pc < len(offsets) else frame.pc
            return Trap(kind, detail, frame.func_index, at)
        return Trap(kind, detail)

    def _push_frame(self, func_index: int) -> None:
        if len(self.call_stack) >= self.instance.max_frames:
            raise self._trap(TrapKind.StackOverflow, f"call depth exceeds {self.instance.max_frames} frames")
        fn = self.instance.compiled(func_index)
        stack = self.operand_stack
        n = fn.n_params
        args = stack[len(stack) - n:] if n else []
        if n:
            del stack[len(stack) - n:]
        self.call_stack.append(_Frame(func_index, fn, args + [0] * fn.n_locals, len(stack)))

    def _call_host(self, func_index: int) -> None:
        host = self.instance.host_functions[func_index]
        stack = self.operand_stack
        n = len(host.signature.params)
        args = [to_signed(v) for v in stack[len(stack) - n:]] if n else []
        if n:
            del stack[len(stack) - n:]
        try:
            result = host.fn(self, *args)
        except Trap:
            raise
        except WasmIOError as e:
            raise self._trap(TrapKind.HostReject, str(e))
        if host.signature.results:
            stack.append((result or 0) & MASK32)

    def _return(self) -> None:
        frame = self.call_stack.pop()
        stack = self.operand_stack
        n = frame.fn.n_results
        results = stack[len(stack) - n:] if n else []
        del stack[frame.base:]
        stack.extend(results)
        if not self.call_stack:
            self._finish()

    def _branch(self, frame: _Frame, depth: int) -> None:
        labels = frame.labels
        if depth >= len(labels):
            self._return()
            return
        cont, arity, height, is_loop = labels[-1 - depth]
        stack = self.operand_stack
        if arity:
            values = stack[len(stack) - arity:]
            del stack[height:]
            stack.extend(values)
        else:
            del stack[height:]
        if is_loop:
            del labels[len(labels) - depth:]
        else:
            del labels[len(labels) - 1 - depth:]
        frame.pc = cont

    def _load(self, addr: int, width: int, signed: bool) -> int:
        memory = self.instance.memory
        if addr + width <= memory.limit:
            value = memory.load(addr, width)
        else:
            hooked = mem_access_hook(self.instance, addr, width, "read", None)
            if hooked is None:
                raise self._trap(TrapKind.OutOfBounds, f"read of {width} bytes at 0x{addr:08x}")
            value = hooked & ((1 << (8 * width)) - 1)
        if signed and width < 4 and value & (1 << (8 * width - 1)):
            value = (value - (1 << (8 * width))) & MASK32
        return value

    def _store(self, addr: int, width: int, value: int) -> None:
        memory = self.instance.memory
        value &= (1 << (8 * width)) - 1
        if addr + width <= memory.limit:
            memory.store(addr, width, value)
            return
        if mem_access_hook(self.instance, addr, width, "write", value) is None:
            raise self._trap(TrapKind.OutOfBounds, f"write of {width} bytes at 0x{addr:08x}")

    # -- the step ------------------------------------------------------------

    def step(self) -> bool:
        """Execute one instruction. Returns False once the invocation has finished."""
        if self.finished:
            return False
        frame = self.call_stack[-1]
        fn = frame.fn
        pc = frame.pc
        if pc >= len(fn.code):
            # implicit end of the function body
            self._return()
            self.ledger.charge("interp", 1)
            return not self.finished

        ins = fn.code[pc]
        op = ins[0]
        stack = self.operand_stack
        frame.pc = pc + 1

        if op == "local.get":
            stack.append(frame.locals[ins[1]])
        elif op == "i32.const":
            stack.append(ins[1] & MASK32)
        elif op in _BINOPS:
            b = stack.pop()
            stack[-1] = _BINOPS[op](stack[-1], b)
        elif op == "local.set":
            frame.locals[ins[1]] = stack.pop()
        elif op == "local.tee":
            frame.locals[ins[1]] = stack[-1]
        elif op == "br_if":
            if stack.pop():
                self._branch(frame, ins[1])
        elif op == "br":
            self._branch(frame, ins[1])
        elif op in LOAD_WIDTHS:
            width, signed = LOAD_WIDTHS[op]
            addr = (stack.pop() + ins[2]) & MASK32
            frame.pc = pc
            stack.append(self._load(addr, width, signed))
            frame.pc = pc + 1
        elif op in STORE_WIDTHS:
            value = stack.pop()
            addr = (stack.pop() + ins[2]) & MASK32
            frame.pc = pc
            self._store(addr, STORE_WIDTHS[op], value)
            frame.pc = pc + 1
        elif op in _UNOPS:
            stack[-1] = _UNOPS[op](stack[-1])
        elif op == "global.get":
            stack.append(self.instance.globals[ins[1]])
        elif op == "global.set":
            self.instance.globals[ins[1]] = stack.pop()
        elif op == "block":
            frame.labels.append((fn.ends[pc] + 1, 0 if ins[1] is None else 1, len(stack), False))
        elif op == "loop":
            frame.labels.append((pc + 1, 0, len(stack), True))
        elif op == "if":
            cond = stack.pop()
            frame.labels.append((fn.ends[pc] + 1, 0 if ins[1] is None else 1, len(stack), False))
            if not cond:
                frame.pc = fn.elses[pc] + 1 if pc in fn.elses else fn.ends[pc]
        elif op == "else":
            # end of the taken then-branch: skip to the matching end
            frame.pc = fn.else_ends[pc]
        elif op == "end":
            frame.labels.pop()
        elif op == "call":
            callee = ins[1]
            if callee < self.instance.module.num_imported_functions:
                frame.pc = pc
                self._call_host(callee)
                frame.pc = pc + 1
            else:
                frame.pc = pc
                self._push_frame(callee)
                frame.pc = pc + 1
        elif op == "call_indirect":
            self._call_indirect(frame, pc, ins[1])
        elif op == "return":
            self._return()
        elif op == "drop":
            stack.pop()
        elif op == "select":
            cond = stack.pop()
            b = stack.pop()
            if not cond:
                stack[-1] = b
        elif op == "nop":
            pass
        elif op in ("i32.div_s", "i32.div_u", "i32.rem_s", "i32.rem_u"):
            frame.pc = pc
            b = stack.pop()
            stack[-1] = self._divide(op, stack[-1], b)
            frame.pc = pc + 1
        elif op == "unreachable":
            frame.pc = pc
            raise self._trap(TrapKind.UnreachableInstr, "unreachable executed")
        else:
            frame.pc = pc
            raise self._trap(TrapKind.HostReject, f"unsupported instruction {op}")

        self.ledger.charge("interp", 1)
        return not self.finished

    def _call_indirect(self, frame: _Frame, pc: int, type_index: int) -> None:
        module = self.instance.module
        slot = self.operand_stack.pop()
        frame.pc = pc
        table = self.instance.table
        if slot >= len(table) or table[slot] is None:
            raise self._trap(TrapKind.BadIndirectCall, f"table slot {slot} is empty or out of range")
        callee = table[slot]
        if module.func_type(callee) != module.types[type_index]:
            raise self._trap(TrapKind.BadIndirectCall, f"signature mismatch calling table slot {slot}")
        if callee < module.num_imported_functions:
            self._call_host(callee)
        else:
            self._push_frame(callee)
        frame.pc = pc + 1

    def _divide(self, op: str, a: int, b: int) -> int:
        if b == 0:
            raise self._trap(TrapKind.DivByZero, f"{op} by zero")
        if op == "i32.div_u":
            return a // b
        if op == "i32.rem_u":
            return a % b
        sa, sb = _sx(a), _sx(b)
        if op == "i32.div_s" and sa == -0x80000000 and sb == -1:
            raise self._trap(TrapKind.IntegerOverflow, "i32.div_s overflow")
        quotient = abs(sa) // abs(sb)
        if (sa < 0) != (sb < 0):
            quotient = -quotient
        if op == "i32.div_s":
            return quotient & MASK32
        return (sa - sb * quotient) & MASK32


def invoke(
    inst: ModuleInstance,
    func: Union[str, int],
    args: Sequence[int] = (),
    ledger: Optional[StepLedger] = None,
) -> List[int]:
    """
    Run one function to completion in a fresh execution environment.
    Raises Trap on faults; the instance's globals and memory keep every
    completed mutation.
    """
    func_index = inst.export_index(func) if isinstance(func, str) else func
    env = ExecutionEnvironment(inst, ledger)
    env.start(func_index, args)
    return env.run()
