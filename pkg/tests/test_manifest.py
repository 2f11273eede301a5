import sys
import os
import numpy as np

# Add the parent directory to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.services.errors import AlreadyEmbedded, DecodeError, EncodeError, ParseError
from app.services.manifest import (
    MAGIC,
    SECTION_NAME,
    CopyDescriptor,
    DeviceRequirement,
    InterruptSubscription,
    PeripheralRequirements,
    RegisterRequirement,
    decode_requirements,
    embed_requirements,
    encode_requirements,
    extract_requirements,
    parse_manifest,
)
from app.services.wasm_binary import I32, FunctionSpec, ModuleSpec, decode_module, emit_module

SAMPLE_MANIFEST = """
# blinky service
require-register gpio0_odr dummy=0x80000000 width=4
require-register tim2_sr dummy=0x80000100 width=4
require-device gpio0
subscribe-interrupt tim2_cc priority=3 handler=0
copy tim2_cc tim2_sr dest=0x200 width=4
"""


def _sample_requirements() -> PeripheralRequirements:
    return PeripheralRequirements(
        registers=[
            RegisterRequirement("gpio0_odr", 0x80000000, 4),
            RegisterRequirement("tim2_sr", 0x80000100, 4),
        ],
        devices=[DeviceRequirement("gpio0")],
        interrupts=[InterruptSubscription("tim2_cc", 3, 0, (CopyDescriptor("tim2_sr", 0x200, 4),))],
    )


def _generated_requirements(rng) -> PeripheralRequirements:
    req = PeripheralRequirements()
    for i in range(int(rng.integers(0, 6))):
        width = int(rng.choice([1, 2, 4]))
        req.registers.append(RegisterRequirement(f"reg{i}", 0x80000000 + 0x100 * i, width))
    for i in range(int(rng.integers(0, 3))):
        req.devices.append(DeviceRequirement(f"dev{i}"))
    for i in range(int(rng.integers(0, 4))):
        copies = []
        if req.registers:
            for _ in range(int(rng.integers(0, 9))):
                source = req.registers[int(rng.integers(0, len(req.registers)))]
                copies.append(CopyDescriptor(source.label, int(rng.integers(0, 1 << 32)), source.width))
        req.interrupts.append(InterruptSubscription(
            f"irq{i}", int(rng.integers(0, 256)), int(rng.integers(0, 1 << 32)), tuple(copies)
        ))
    return req


def _bare_module() -> bytes:
    spec = ModuleSpec(
        functions=[FunctionSpec((), (I32,), (), [("i32.const", 1)])],
        exports={"one": 0},
        memory=(1, None),
    )
    return emit_module(spec)


def test_encode_layout():
    print("Testing requirements layout...")
    payload = encode_requirements(_sample_requirements())
    assert payload[:4] == MAGIC
    # version 1, two registers
    assert payload[4:8] == b"\x01\x00\x02\x00"
    assert decode_requirements(payload) == _sample_requirements()
    print("✓ Requirements layout passed")


def test_generated_requirements_survive_encoding():
    print("Testing 10k generated requirement sets...")
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        req = _generated_requirements(rng)
        assert decode_requirements(encode_requirements(req)) == req
    print("✓ Generated requirement sets passed")


def test_encode_rejects_invalid():
    print("Testing requirements invariants...")
    bad = [
        PeripheralRequirements(registers=[RegisterRequirement("", 0x80000000)]),
        PeripheralRequirements(registers=[RegisterRequirement("x" * 65, 0x80000000)]),
        PeripheralRequirements(registers=[RegisterRequirement("low", 0x1000)]),
        PeripheralRequirements(registers=[RegisterRequirement("odd", 0x80000002, 4)]),
        PeripheralRequirements(registers=[RegisterRequirement("w", 0x80000000, 3)]),
        PeripheralRequirements(registers=[
            RegisterRequirement("a", 0x80000000), RegisterRequirement("a", 0x80000100),
        ]),
        PeripheralRequirements(registers=[
            RegisterRequirement("a", 0x80000000), RegisterRequirement("b", 0x80000000),
        ]),
        PeripheralRequirements(interrupts=[InterruptSubscription("irq", 256, 0)]),
        PeripheralRequirements(interrupts=[
            InterruptSubscription("irq", 0, 0, (CopyDescriptor("ghost", 0x100),)),
        ]),
    ]
    for req in bad:
        try:
            encode_requirements(req)
            assert False, f"expected EncodeError for {req}"
        except EncodeError:
            pass

    many = PeripheralRequirements(
        registers=[RegisterRequirement("sr", 0x80000000)],
        interrupts=[InterruptSubscription("irq", 0, 0, tuple(CopyDescriptor("sr", 4 * i) for i in range(9)))],
    )
    try:
        encode_requirements(many)
        assert False, "expected EncodeError"
    except EncodeError as e:
        assert "limit is 8" in str(e)
    assert decode_requirements(encode_requirements(many, max_copies=9)) == many
    print("✓ Requirements invariants passed")


def test_decode_errors():
    print("Testing requirements decode errors...")
    payload = encode_requirements(_sample_requirements())
    cases = [
        (b"WIOX" + payload[4:], 0),
        (MAGIC + b"\x02\x00" + payload[6:], 4),
    ]
    for data, offset in cases:
        try:
            decode_requirements(data)
            assert False, "expected DecodeError"
        except DecodeError as e:
            assert e.offset == offset
    for data in (payload[:-1], payload + b"\x00"):
        try:
            decode_requirements(data)
            assert False, "expected DecodeError"
        except DecodeError:
            pass
    print("✓ Requirements decode errors passed")


def test_embed_and_extract():
    print("Testing section embedding...")
    wasm = _bare_module()
    embedded = embed_requirements(wasm, _sample_requirements())
    # the original bytes are an untouched prefix
    assert embedded[: len(wasm)] == wasm
    module = decode_module(embedded)
    assert SECTION_NAME in module.custom_sections
    assert extract_requirements(module) == _sample_requirements()
    assert extract_requirements(decode_module(wasm)) is None
    try:
        embed_requirements(embedded, _sample_requirements())
        assert False, "expected AlreadyEmbedded"
    except AlreadyEmbedded:
        pass
    print("✓ Section embedding passed")


def test_parse_manifest():
    print("Testing manifest parsing...")
    assert parse_manifest(SAMPLE_MANIFEST) == _sample_requirements()
    assert parse_manifest("# nothing here\n\n").is_empty
    print("✓ Manifest parsing passed")


def test_parse_manifest_errors():
    print("Testing manifest errors...")
    cases = [
        ("bogus x", 1, "Unknown directive"),
        ("require-register r dummy=0x80000000", 1, "Missing key"),
        ("require-register r dummy=0x80000000 width=4 extra=1", 1, "Unknown key"),
        ("require-register r dummy=zz width=4", 1, "not a number"),
        ("\ncopy irq reg dest=0 width=4", 2, "unknown subscription"),
        ("subscribe-interrupt a priority=1 handler=0\nsubscribe-interrupt a priority=1 handler=0", 2, "Duplicate"),
        ("require-device", 1, "exactly one"),
    ]
    for text, line, fragment in cases:
        try:
            parse_manifest(text)
            assert False, f"expected ParseError for {text!r}"
        except ParseError as e:
            assert e.line == line, (text, e.line)
            assert fragment in str(e), str(e)
    # semantic violations surface as ParseError too
    try:
        parse_manifest("require-register r dummy=0x100 width=4")
        assert False, "expected ParseError"
    except ParseError as e:
        assert "below" in str(e)
    print("✓ Manifest errors passed")


if __name__ == "__main__":
    try:
        test_encode_layout()
        test_generated_requirements_survive_encoding()
        test_encode_rejects_invalid()
        test_decode_errors()
        test_embed_and_extract()
        test_parse_manifest()
        test_parse_manifest_errors()
        print("\nAll manifest tests passed successfully!")
    except Exception as e:
        print(f"\nTests failed: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
