import sys
import os

# Add the parent directory to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.services.errors import LinkError, WasmIOError
from app.services.ledger import StepLedger
from app.services.wasm_binary import I32, FuncType, FunctionSpec, ImportSpec, ModuleSpec, decode_module, emit_module
from app.services.wasm_exec import (
    ExecutionEnvironment,
    HostLinker,
    MemoryConfig,
    Trap,
    TrapKind,
    instantiate,
    invoke,
)
from app.services.wasm_validate import validate_module


def _instance(functions, exports, imports=(), linker=None, memory=(1, None), table=(), ledger=None, max_frames=1024):
    spec = ModuleSpec(
        imports=list(imports),
        functions=list(functions),
        exports=exports,
        memory=memory,
        table=list(table),
    )
    module = decode_module(emit_module(spec))
    validate_module(module)
    return instantiate(module, linker or HostLinker(), MemoryConfig(), "svc", max_frames, ledger)


ADD = FunctionSpec((I32, I32), (I32,), (), [("local.get", 0), ("local.get", 1), ("i32.add",)])


def test_add_and_wraparound():
    print("Testing i32 arithmetic...")
    inst = _instance([ADD], {"add": 0})
    assert invoke(inst, "add", [2, 3]) == [5]
    assert invoke(inst, "add", [0x7FFFFFFF, 1]) == [-2147483648]
    assert invoke(inst, "add", [-1, 1]) == [0]
    print("✓ i32 arithmetic passed")


def test_interp_steps_charged_per_instruction():
    print("Testing interpreter step accounting...")
    ledger = StepLedger()
    inst = _instance([ADD], {"add": 0}, ledger=ledger)
    invoke(inst, "add", [1, 1], ledger)
    # three instructions plus the implicit end
    assert ledger.counts["interp"] == 4
    assert ledger.clock.now == 4
    print("✓ Step accounting passed")


def test_loop_sum():
    print("Testing loops and branches...")
    body = [
        ("block", None), ("loop", None),
        ("local.get", 0), ("i32.eqz",), ("br_if", 1),
        ("local.get", 1), ("local.get", 0), ("i32.add",), ("local.set", 1),
        ("local.get", 0), ("i32.const", 1), ("i32.sub",), ("local.set", 0),
        ("br", 0),
        ("end",), ("end",),
        ("local.get", 1),
    ]
    inst = _instance([FunctionSpec((I32,), (I32,), (I32,), body)], {"sum": 0})
    assert invoke(inst, "sum", [10]) == [55]
    assert invoke(inst, "sum", [0]) == [0]
    print("✓ Loops and branches passed")


def test_if_else_and_select():
    print("Testing if/else and select...")
    body = [
        ("local.get", 0), ("if", I32),
        ("i32.const", 7),
        ("else",),
        ("i32.const", 9),
        ("end",),
    ]
    select = [("i32.const", 1), ("i32.const", 2), ("local.get", 0), ("select",)]
    inst = _instance(
        [FunctionSpec((I32,), (I32,), (), body), FunctionSpec((I32,), (I32,), (), select)],
        {"pick": 0, "sel": 1},
    )
    assert invoke(inst, "pick", [1]) == [7]
    assert invoke(inst, "pick", [0]) == [9]
    assert invoke(inst, "sel", [1]) == [1]
    assert invoke(inst, "sel", [0]) == [2]
    print("✓ if/else and select passed")


def test_division_traps():
    print("Testing division traps...")
    div = FunctionSpec((I32, I32), (I32,), (), [("local.get", 0), ("local.get", 1), ("i32.div_s",)])
    rem = FunctionSpec((I32, I32), (I32,), (), [("local.get", 0), ("local.get", 1), ("i32.rem_s",)])
    inst = _instance([div, rem], {"div": 0, "rem": 1})
    assert invoke(inst, "div", [-7, 2]) == [-3]
    assert invoke(inst, "rem", [-7, 2]) == [-1]
    for args, kind in (([1, 0], TrapKind.DivByZero), ([-2147483648, -1], TrapKind.IntegerOverflow)):
        try:
            invoke(inst, "div", args)
            assert False, "expected Trap"
        except Trap as t:
            assert t.kind is kind
            assert t.at_function == 0
    print("✓ Division traps passed")


def test_memory_and_out_of_bounds():
    print("Testing linear memory bounds...")
    store = FunctionSpec((I32, I32), (), (), [("local.get", 0), ("local.get", 1), ("i32.store", 2, 0)])
    load = FunctionSpec((I32,), (I32,), (), [("local.get", 0), ("i32.load", 2, 0)])
    load8 = FunctionSpec((I32,), (I32,), (), [("local.get", 0), ("i32.load8_s", 0, 0)])
    inst = _instance([store, load, load8], {"store": 0, "load": 1, "load8": 2})
    invoke(inst, "store", [0x10, 0x1234FF])
    assert invoke(inst, "load", [0x10]) == [0x1234FF]
    assert invoke(inst, "load8", [0x10]) == [-1]
    assert invoke(inst, "load", [4092]) == [0]
    try:
        invoke(inst, "load", [4093])
        assert False, "expected Trap"
    except Trap as t:
        assert t.kind is TrapKind.OutOfBounds
    # the completed store survives the trap
    assert invoke(inst, "load", [0x10]) == [0x1234FF]
    print("✓ Linear memory bounds passed")


def test_io_hook_only_on_failed_bounds_check():
    print("Testing memory access hook...")
    load = FunctionSpec((I32,), (I32,), (), [("local.get", 0), ("i32.load", 2, 0)])
    inst = _instance([load], {"load": 0})
    seen = []

    def hook(instance, addr, width, kind, value):
        seen.append((addr, width, kind))
        return 42 if addr == 0x80000000 else None

    inst.io_hook = hook
    assert invoke(inst, "load", [0x20]) == [0]
    assert seen == []
    assert invoke(inst, "load", [-0x80000000]) == [42]
    assert seen == [(0x80000000, 4, "read")]
    try:
        invoke(inst, "load", [0x90000000 - (1 << 32)])
        assert False, "expected Trap"
    except Trap as t:
        assert t.kind is TrapKind.OutOfBounds
    print("✓ Memory access hook passed")


def test_host_imports():
    print("Testing host imports...")
    linker = HostLinker()
    calls = []

    def double(env, value):
        calls.append(value)
        return value * 2

    def reject(env, value):
        raise WasmIOError("host refused")

    linker.define("env", "double", 1, 1, double)
    linker.define("env", "reject", 1, 1, reject)
    body = [("local.get", 0), ("call", 0)]
    inst = _instance(
        [FunctionSpec((I32,), (I32,), (), body), FunctionSpec((I32,), (I32,), (), [("local.get", 0), ("call", 1)])],
        {"twice": 2, "bad": 3},
        imports=[ImportSpec("env", "double", (I32,), (I32,)), ImportSpec("env", "reject", (I32,), (I32,))],
        linker=linker,
    )
    assert invoke(inst, "twice", [-4]) == [-8]
    assert calls == [-4]
    try:
        invoke(inst, "bad", [1])
        assert False, "expected Trap"
    except Trap as t:
        assert t.kind is TrapKind.HostReject
    print("✓ Host imports passed")


def test_link_errors():
    print("Testing link errors...")
    spec = ModuleSpec(imports=[ImportSpec("env", "nope", (), ())])
    module = decode_module(emit_module(spec))
    try:
        instantiate(module, HostLinker())
        assert False, "expected LinkError"
    except LinkError as e:
        assert "Unresolved import env.nope" in str(e)

    linker = HostLinker()
    linker.define("env", "nope", 1, 0, lambda env, a: None)
    try:
        instantiate(module, linker)
        assert False, "expected LinkError"
    except LinkError as e:
        assert "signature" in str(e)
    print("✓ Link errors passed")


def test_stack_overflow_and_unreachable():
    print("Testing stack overflow and unreachable...")
    recurse = FunctionSpec((), (), (), [("call", 0)])
    trap = FunctionSpec((), (), (), [("unreachable",)])
    inst = _instance([recurse, trap], {"recurse": 0, "trap": 1}, max_frames=16)
    try:
        invoke(inst, "recurse")
        assert False, "expected Trap"
    except Trap as t:
        assert t.kind is TrapKind.StackOverflow
    try:
        invoke(inst, "trap")
        assert False, "expected Trap"
    except Trap as t:
        assert t.kind is TrapKind.UnreachableInstr
    print("✓ Stack overflow and unreachable passed")


def test_call_indirect():
    print("Testing call_indirect...")
    target = FunctionSpec((), (I32,), (), [("i32.const", 99)])
    caller = FunctionSpec((I32,), (I32,), (), [("local.get", 0), ("call_indirect", FuncType((), (I32,)))])
    inst = _instance([target, caller], {"dispatch": 1}, table=[0])
    assert invoke(inst, "dispatch", [0]) == [99]
    try:
        invoke(inst, "dispatch", [3])
        assert False, "expected Trap"
    except Trap as t:
        assert t.kind is TrapKind.BadIndirectCall
    print("✓ call_indirect passed")


def test_stepwise_execution():
    print("Testing resumable execution...")
    inst = _instance([ADD], {"add": 0})
    env = ExecutionEnvironment(inst)
    env.start(inst.export_index("add"), [20, 22])
    steps = 0
    while env.step():
        steps += 1
    assert env.finished
    assert env.results == [42]
    assert steps == 3
    try:
        inst.export_index("missing")
        assert False, "expected ValueError"
    except ValueError:
        pass
    print("✓ Resumable execution passed")


if __name__ == "__main__":
    try:
        test_add_and_wraparound()
        test_interp_steps_charged_per_instruction()
        test_loop_sum()
        test_if_else_and_select()
        test_division_traps()
        test_memory_and_out_of_bounds()
        test_io_hook_only_on_failed_bounds_check()
        test_host_imports()
        test_link_errors()
        test_stack_overflow_and_unreachable()
        test_call_indirect()
        test_stepwise_execution()
        print("\nAll interpreter tests passed successfully!")
    except Exception as e:
        print(f"\nTests failed: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
