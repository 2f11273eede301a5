"""
Generated benchmark services. Each program is emitted as a module binary
with its requirements section embedded, for one access mode at a time.
Pure Python module — no FastAPI imports.
"""

from typing import Dict, List, Optional, Sequence, Tuple

from app.services.access import OP_GPIO_SET, OP_SPI_TRANSFER, AccessMode
from app.services.manifest import (
    CopyDescriptor,
    DeviceRequirement,
    InterruptSubscription,
    PeripheralRequirements,
    RegisterRequirement,
    embed_requirements,
)
from app.services.wasm_binary import (
    I32,
    DataSegment,
    FunctionSpec,
    GlobalDecl,
    ImportSpec,
    ModuleSpec,
    emit_module,
)

# host import indices, in declaration order
F_DEVICE_HANDLE = 0
F_OSAPI_CALL = 1
F_RAPI_HANDLE = 2
F_RAPI_READ = 3
F_RAPI_WRITE = 4
F_IRQ_REGISTER = 5

HOST_IMPORTS: List[Tuple[str, int]] = [
    ("wio_device_handle", 2),
    ("wio_osapi_call", 5),
    ("wio_rapi_handle", 2),
    ("wio_rapi_read", 1),
    ("wio_rapi_write", 2),
    ("wio_irq_register", 4),
]

LABEL_BASE = 0x40
SNAPSHOT_DEST = 0x100
OBSERVED = 0x200
PAYLOAD_BASE = 0x400
DUMMY_BASE = 0x80000000
DUMMY_STRIDE = 0x100
SPI_WORD_BASE = 0xA500


def host_imports() -> List[ImportSpec]:
    return [ImportSpec("env", name, (I32,) * params, (I32,)) for name, params in HOST_IMPORTS]


class ServiceProgram:
    """
    Builder for a service that reaches its registers through one access mode.
    Handles (RAPI, RAPI_DMA, OSAPI) are acquired by the `setup` export and
    kept in globals; MMIO programs address dummy registers directly.
    """

    def __init__(
        self,
        mode: AccessMode,
        registers: Sequence[str] = (),
        devices: Sequence[str] = (),
        width: int = 4,
    ):
        self.mode = mode
        self.registers = list(registers)
        self.devices = list(devices)
        self.width = width
        self.dummies: Dict[str, int] = {
            label: DUMMY_BASE + DUMMY_STRIDE * i for i, label in enumerate(self.registers)
        }
        self._label_data = bytearray()
        self._label_ptrs: Dict[str, Tuple[int, int]] = {}
        self.globals: Dict[str, int] = {}
        self.functions: List[FunctionSpec] = []
        self.exports: Dict[str, int] = {}
        self.table: List[int] = []
        self.data: List[DataSegment] = []
        self.interrupts: List[InterruptSubscription] = []
        self.pages = 1

    # -- layout --------------------------------------------------------------

    def label_ptr(self, label: str) -> Tuple[int, int]:
        if label not in self._label_ptrs:
            raw = label.encode("utf-8")
            self._label_ptrs[label] = (LABEL_BASE + len(self._label_data), len(raw))
            self._label_data += raw
        return self._label_ptrs[label]

    def handle_global(self, label: str) -> int:
        if label not in self.globals:
            self.globals[label] = len(self.globals)
        return self.globals[label]

    def add_function(self, name: Optional[str], body: List[tuple], params: int = 0, results: int = 0, locals_: int = 0) -> int:
        index = len(HOST_IMPORTS) + len(self.functions)
        self.functions.append(FunctionSpec((I32,) * params, (I32,) * results, (I32,) * locals_, body))
        if name:
            self.exports[name] = index
        return index

    # -- access primitives ---------------------------------------------------

    @property
    def uses_handles(self) -> bool:
        return self.mode in (AccessMode.RAPI, AccessMode.RAPI_DMA)

    def setup_body(self, labels: Optional[Sequence[str]] = None) -> List[tuple]:
        body: List[tuple] = []
        if self.uses_handles:
            for label in (self.registers if labels is None else labels):
                ptr, length = self.label_ptr(label)
                body += [("i32.const", ptr), ("i32.const", length), ("call", F_RAPI_HANDLE),
                         ("global.set", self.handle_global(label))]
        elif self.mode is AccessMode.OSAPI:
            for label in self.devices:
                ptr, length = self.label_ptr(label)
                body += [("i32.const", ptr), ("i32.const", length), ("call", F_DEVICE_HANDLE),
                         ("global.set", self.handle_global(label))]
        return body

    def _dummy(self, label: str) -> int:
        # signed form, as the decoder reports i32.const immediates
        value = self.dummies[label]
        return value - 0x100000000 if value & 0x80000000 else value

    def read(self, label: str) -> List[tuple]:
        if self.mode is AccessMode.RAPI:
            return [("global.get", self.handle_global(label)), ("call", F_RAPI_READ)]
        if self.mode is AccessMode.RAPI_DMA:
            return [("global.get", self.handle_global(label)), ("i32.load", 2, 0)]
        if self.mode in (AccessMode.MMIO, AccessMode.MMIO_DMA):
            return [("i32.const", self._dummy(label)), ("i32.load", 2, 0)]
        raise ValueError(f"Register reads are not available in {self.mode.value} mode")

    def write(self, label: str, value: List[tuple]) -> List[tuple]:
        if self.mode is AccessMode.RAPI:
            return [("global.get", self.handle_global(label))] + value + [("call", F_RAPI_WRITE), ("drop",)]
        if self.mode is AccessMode.RAPI_DMA:
            return [("global.get", self.handle_global(label))] + value + [("i32.store", 2, 0)]
        if self.mode in (AccessMode.MMIO, AccessMode.MMIO_DMA):
            return [("i32.const", self._dummy(label))] + value + [("i32.store", 2, 0)]
        raise ValueError(f"Register writes are not available in {self.mode.value} mode")

    def gpio_set(self, device: str, odr_label: str, pin: int, level: int) -> List[tuple]:
        if self.mode is AccessMode.OSAPI:
            return [
                ("global.get", self.handle_global(device)), ("i32.const", OP_GPIO_SET),
                ("i32.const", pin), ("i32.const", level), ("i32.const", 0),
                ("call", F_OSAPI_CALL), ("drop",),
            ]
        return self.write(odr_label, [("i32.const", (1 << pin) if level else 0)])

    # -- output --------------------------------------------------------------

    def requirements(self) -> PeripheralRequirements:
        return PeripheralRequirements(
            [RegisterRequirement(label, self.dummies[label], self.width) for label in self.registers],
            [DeviceRequirement(label) for label in self.devices],
            list(self.interrupts),
        )

    def copy_dest(self, source_label: str, memory_dest: int = SNAPSHOT_DEST) -> int:
        """Where a copy of `source_label` is delivered for this mode."""
        if self.mode.copies_to_memory:
            return memory_dest
        return self.dummies[source_label]

    def module_spec(self) -> ModuleSpec:
        data = list(self.data)
        if self._label_data:
            data.insert(0, DataSegment(LABEL_BASE, bytes(self._label_data)))
        return ModuleSpec(
            imports=host_imports(),
            functions=list(self.functions),
            exports=dict(self.exports),
            memory=(self.pages, None),
            globals=[GlobalDecl(I32, True, 0) for _ in self.globals],
            table=list(self.table),
            data=data,
        )

    def build(self) -> bytes:
        return embed_requirements(emit_module(self.module_spec()), self.requirements())


# ---------------------------------------------------------------------------
# Benchmark services
# ---------------------------------------------------------------------------

def gpio_roundtrip_program(mode: AccessMode, pin: int = 3, odr: str = "gpio0_odr", device: str = "gpio0") -> bytes:
    """`setup` acquires handles; `toggle` sets the measurement pin and resets it."""
    program = ServiceProgram(mode, [odr], [device])
    program.add_function("setup", program.setup_body())
    program.add_function(
        "toggle",
        program.gpio_set(device, odr, pin, 1) + program.gpio_set(device, odr, pin, 0),
    )
    return program.build()


def irq_latency_program(
    mode: AccessMode,
    pin: int = 5,
    priority: int = 0,
    irq: str = "tim2_cc",
    flag: str = "tim2_sr",
    odr: str = "gpio0_odr",
    device: str = "gpio0",
) -> bytes:
    """
    Handler subscribed to `irq` with a copy of `flag`: stores the value it
    observes at OBSERVED, then sets the measurement pin.
    """
    program = ServiceProgram(mode, [odr, flag], [device])
    program.add_function("setup", program.setup_body())
    if mode.copies_to_memory:
        observe = [("i32.const", OBSERVED), ("i32.const", SNAPSHOT_DEST), ("i32.load", 2, 0), ("i32.store", 2, 0)]
    else:
        observe = [("i32.const", OBSERVED)] + program.read(flag) + [("i32.store", 2, 0)]
    handler = program.add_function("handler", observe + program.gpio_set(device, odr, pin, 1))
    program.table = [handler]
    program.interrupts.append(InterruptSubscription(
        irq, priority, 0, (CopyDescriptor(flag, program.copy_dest(flag), 4),)
    ))
    return program.build()


def spi_transfer_program(mode: AccessMode, words: int, sr: str = "spi1_sr", dr: str = "spi1_dr", device: str = "spi1") -> bytes:
    """
    `transfer` sends `words` 16-bit words: polling TXE before every data
    register write, or one driver call in OSAPI mode.
    """
    program = ServiceProgram(mode, [sr, dr], [device])
    program.add_function("setup", program.setup_body())
    if mode is AccessMode.OSAPI:
        payload = b"".join(((SPI_WORD_BASE + i) & 0xFFFF).to_bytes(2, "little") for i in range(words))
        program.data.append(DataSegment(PAYLOAD_BASE, payload))
        program.pages = max(1, -(-(PAYLOAD_BASE + len(payload)) // 4096))
        body = [
            ("global.get", program.handle_global(device)), ("i32.const", OP_SPI_TRANSFER),
            ("i32.const", PAYLOAD_BASE), ("i32.const", 2 * words), ("i32.const", 0),
            ("call", F_OSAPI_CALL), ("drop",),
        ]
        program.add_function("transfer", body)
        return program.build()

    poll = [("loop", None)] + program.read(sr) + [
        ("i32.const", 2), ("i32.and",), ("i32.eqz",), ("br_if", 0), ("end",),
    ]
    advance = [("local.get", 0), ("i32.const", 1), ("i32.add",), ("local.set", 0)]
    send = program.write(dr, [("i32.const", SPI_WORD_BASE - 1), ("local.get", 0), ("i32.add",)])
    body = (
        [("loop", None)] + poll + advance + send
        + [("local.get", 0), ("i32.const", words), ("i32.lt_u",), ("br_if", 0), ("end",)]
    )
    program.add_function("transfer", body, locals_=1)
    return program.build()


def register_probe_program(mode: AccessMode, registers: Sequence[str], target: str) -> bytes:
    """`probe` performs the check path for `target` once: a handle lookup or a dummy load."""
    program = ServiceProgram(mode, registers, [])
    if program.uses_handles:
        ptr, length = program.label_ptr(target)
        body = [("i32.const", ptr), ("i32.const", length), ("call", F_RAPI_HANDLE), ("drop",)]
    else:
        body = program.read(target) + [("drop",)]
    program.add_function("probe", body)
    return program.build()
