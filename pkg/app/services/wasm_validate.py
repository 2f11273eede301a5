"""
Static validation of decoded modules: stack-type discipline per instruction,
index ranges and the i32-only signature rule.
Pure Python module — no FastAPI imports.
"""

from dataclasses import dataclass
from typing import List

from app.services.errors import ValidateError
from app.services.wasm_binary import I32, LOAD_WIDTHS, STORE_WIDTHS, FuncType, WasmModule

_UNARY = {"i32.eqz", "i32.clz", "i32.ctz", "i32.popcnt"}
_BINARY = {
    "i32.eq", "i32.ne", "i32.lt_s", "i32.lt_u", "i32.gt_s", "i32.gt_u", "i32.le_s",
    "i32.le_u", "i32.ge_s", "i32.ge_u", "i32.add", "i32.sub", "i32.mul", "i32.div_s",
    "i32.div_u", "i32.rem_s", "i32.rem_u", "i32.and", "i32.or", "i32.xor", "i32.shl",
    "i32.shr_s", "i32.shr_u", "i32.rotl", "i32.rotr",
}


@dataclass
class _Ctrl:
    kind: str
    label_arity: int
    end_arity: int
    height: int
    unreachable: bool = False


def _check_signature(ftype: FuncType, what: str, func_index: int) -> None:
    for valtype in ftype.params + ftype.results:
        if valtype != I32:
            raise ValidateError(f"{what} uses non-i32 value type {valtype}", func_index, 0)
    if len(ftype.results) > 1:
        raise ValidateError(f"{what} returns more than one value", func_index, 0)


def validate_module(module: WasmModule) -> None:
    """
    Validate a decoded module. Returns None when the module is well-formed,
    raises ValidateError naming the function index and instruction offset otherwise.
    """
    for index, imp in enumerate(module.imports):
        _check_signature(imp.signature, f"import {imp.module_name}.{imp.field_name}", index)
    for ftype in module.types:
        _check_signature(ftype, "type", 0)
    for glob in module.globals:
        if glob.valtype != I32:
            raise ValidateError(f"global uses non-i32 type {glob.valtype}", 0, 0)
    for name, func_index in module.exports.items():
        if func_index >= module.function_count:
            raise ValidateError(f"export '{name}' references missing function", func_index, 0)
    for slot, func_index in enumerate(module.function_table):
        if func_index is not None and func_index >= module.function_count:
            raise ValidateError(f"table slot {slot} references missing function", func_index, 0)
    if module.data and module.memory_decl is None:
        raise ValidateError("data segment without a memory", 0, 0)

    for i, body in enumerate(module.functions):
        _validate_body(module, module.num_imported_functions + i, body)


def _validate_body(module: WasmModule, func_index: int, body) -> None:
    ftype = module.types[body.type_index]
    local_types = ftype.params + body.locals
    for valtype in body.locals:
        if valtype != I32:
            raise ValidateError(f"local uses non-i32 type {valtype}", func_index, 0)
    n_results = len(ftype.results)

    stack = 0
    ctrls: List[_Ctrl] = [_Ctrl("func", n_results, n_results, 0)]

    def where(pc: int) -> int:
        return body.offsets[pc] if pc < len(body.offsets) else pc

    def fail(message: str, pc: int):
        raise ValidateError(message, func_index, where(pc))

    def pop(count: int, pc: int) -> None:
        nonlocal stack
        for _ in range(count):
            frame = ctrls[-1]
            if stack == frame.height:
                if frame.unreachable:
                    continue
                fail("operand stack underflow", pc)
            stack -= 1

    def mark_unreachable() -> None:
        nonlocal stack
        stack = ctrls[-1].height
        ctrls[-1].unreachable = True

    def blocktype_arity(bt, pc: int) -> int:
        if bt is None:
            return 0
        if bt != I32:
            fail(f"block type {bt} is not supported", pc)
        return 1

    for pc, ins in enumerate(body.code):
        op = ins[0]
        if op == "nop":
            continue
        if op == "unreachable":
            mark_unreachable()
        elif op in ("block", "loop"):
            arity = blocktype_arity(ins[1], pc)
            label_arity = 0 if op == "loop" else arity
            ctrls.append(_Ctrl(op, label_arity, arity, stack))
        elif op == "if":
            arity = blocktype_arity(ins[1], pc)
            pop(1, pc)
            ctrls.append(_Ctrl("if", arity, arity, stack))
        elif op == "else":
            frame = ctrls[-1]
            if frame.kind != "if":
                fail("else without matching if", pc)
            if not frame.unreachable and stack - frame.height != frame.end_arity:
                fail("if branch leaves wrong number of values", pc)
            stack = frame.height
            frame.kind = "else"
            frame.unreachable = False
        elif op == "end":
            if len(ctrls) == 1:
                fail("unbalanced end", pc)
            frame = ctrls.pop()
            if frame.unreachable:
                pop_ok = stack - frame.height <= frame.end_arity
            else:
                pop_ok = stack - frame.height == frame.end_arity
            if not pop_ok:
                fail(f"block leaves {stack - frame.height} values, expected {frame.end_arity}", pc)
            if frame.kind == "if" and frame.end_arity:
                fail("if with a result requires an else branch", pc)
            stack = frame.height + frame.end_arity
        elif op in ("br", "br_if"):
            depth = ins[1]
            if depth >= len(ctrls):
                fail(f"branch depth {depth} out of range", pc)
            target = ctrls[-1 - depth]
            if op == "br_if":
                pop(1, pc)
                pop(target.label_arity, pc)
                stack += target.label_arity
            else:
                pop(target.label_arity, pc)
                mark_unreachable()
        elif op == "return":
            pop(n_results, pc)
            mark_unreachable()
        elif op == "call":
            callee = ins[1]
            if callee >= module.function_count:
                fail(f"call to function index {callee} beyond {module.function_count} functions", pc)
            callee_type = module.func_type(callee)
            pop(len(callee_type.params), pc)
            stack += len(callee_type.results)
        elif op == "call_indirect":
            type_index = ins[1]
            if module.table_decl is None and not module.function_table:
                fail("call_indirect without a table", pc)
            if type_index >= len(module.types):
                fail(f"call_indirect type index {type_index} out of range", pc)
            callee_type = module.types[type_index]
            pop(1, pc)
            pop(len(callee_type.params), pc)
            stack += len(callee_type.results)
        elif op == "drop":
            pop(1, pc)
        elif op == "select":
            pop(3, pc)
            stack += 1
        elif op in ("local.get", "local.set", "local.tee"):
            if ins[1] >= len(local_types):
                fail(f"local index {ins[1]} out of range", pc)
            if op == "local.get":
                stack += 1
            elif op == "local.set":
                pop(1, pc)
            else:
                pop(1, pc)
                stack += 1
        elif op in ("global.get", "global.set"):
            if ins[1] >= len(module.globals):
                fail(f"global index {ins[1]} out of range", pc)
            if op == "global.get":
                stack += 1
            else:
                if not module.globals[ins[1]].mutable:
                    fail(f"global {ins[1]} is immutable", pc)
                pop(1, pc)
        elif op in LOAD_WIDTHS:
            if module.memory_decl is None:
                fail("memory access without a memory", pc)
            pop(1, pc)
            stack += 1
        elif op in STORE_WIDTHS:
            if module.memory_decl is None:
                fail("memory access without a memory", pc)
            pop(2, pc)
        elif op == "i32.const":
            stack += 1
        elif op in _UNARY:
            pop(1, pc)
            stack += 1
        elif op in _BINARY:
            pop(2, pc)
            stack += 1
        else:
            fail(f"unsupported instruction {op}", pc)

    if len(ctrls) != 1:
        raise ValidateError("function body ends inside an open block", func_index, len(body.code))
    frame = ctrls[0]
    leftover = stack - frame.height
    if leftover > n_results or (leftover < n_results and not frame.unreachable):
        raise ValidateError(
            f"function leaves {leftover} values on the stack, expected {n_results}",
            func_index,
            len(body.code),
        )
