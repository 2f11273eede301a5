"""
Synchronous peripheral access for one service: OS driver calls (OSAPI),
register handles (RAPI), intercepted loads and stores on dummy registers
(MMIO) and the conveyor memory kept coherent by a simulated DMA controller
(RAPI_DMA / MMIO_DMA).

Every path applies the binding mask, checks permission against the
service's own bindings and charges the step ledger.
Pure Python module — no FastAPI imports.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Set, Tuple

from app.services.devices import (
    GPIO_IDR,
    GPIO_ODR,
    SPI_DR,
    SPI_SR,
    SPI_SR_TXE,
    RegisterFile,
)
from app.services.ledger import CostModel, StepLedger
from app.services.manifest import MAX_LABEL_BYTES, CopyDescriptor
from app.services.platform import RegisterBinding, ResolvedService
from app.services.wasm_exec import HostLinker, LinearMemory, ModuleInstance

logger = logging.getLogger(__name__)

MASK32 = 0xFFFFFFFF
SLOT_SIZE = 4

# wio_osapi_call operations
OP_GPIO_SET = 1
OP_GPIO_GET = 2
OP_SPI_TRANSFER = 3


class AccessMode(Enum):
    OSAPI = "osapi"
    RAPI = "rapi"
    MMIO = "mmio"
    RAPI_DMA = "rapi_dma"
    MMIO_DMA = "mmio_dma"

    @property
    def uses_dma(self) -> bool:
        return self in (AccessMode.RAPI_DMA, AccessMode.MMIO_DMA)

    @property
    def copies_to_memory(self) -> bool:
        return self in (AccessMode.OSAPI, AccessMode.RAPI, AccessMode.RAPI_DMA)


class TrustMode(Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


def parse_mode(text: str) -> AccessMode:
    try:
        return AccessMode(text.lower())
    except ValueError:
        raise ValueError(f"Unknown access mode '{text}' (expected one of {[m.value for m in AccessMode]})")


def parse_trust(text: str) -> TrustMode:
    try:
        return TrustMode(text.lower())
    except ValueError:
        raise ValueError(f"Unknown trust mode '{text}' (expected trusted or untrusted)")


def _width_mask(width: int) -> int:
    return (1 << (8 * width)) - 1


def masked_read(bus: RegisterFile, binding: RegisterBinding) -> int:
    """One bus read; bits outside the mask read as zero."""
    return bus.bus_read(binding.phys_addr, binding.width) & binding.mask


def masked_write(bus: RegisterFile, binding: RegisterBinding, value: int) -> None:
    """Read-modify-write inside the bus model; exactly one traced bus write."""
    current = bus.peek(binding.phys_addr)
    merged = ((current & ~binding.mask) | (value & binding.mask)) & _width_mask(binding.width)
    bus.bus_write(binding.phys_addr, binding.width, merged)


# ---------------------------------------------------------------------------
# Conveyor memory and the DMA controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConveyorSlot:
    offset: int
    binding_index: int
    width: int


@dataclass
class ConveyorRegion:
    base: int
    slots: List[ConveyorSlot] = field(default_factory=list)
    dma_period: int = 1

    @classmethod
    def for_bindings(cls, base: int, bindings: List[RegisterBinding], dma_period: int = 1) -> "ConveyorRegion":
        slots = [ConveyorSlot(i * SLOT_SIZE, i, b.width) for i, b in enumerate(bindings)]
        return cls(base, slots, dma_period)

    @property
    def length(self) -> int:
        return len(self.slots) * SLOT_SIZE

    def address_of(self, binding_index: int) -> int:
        return self.base + self.slots[binding_index].offset

    def slot_at(self, addr: int) -> Optional[ConveyorSlot]:
        for slot in self.slots:
            if self.base + slot.offset == addr:
                return slot
        return None


def conveyor_size(bindings: List[RegisterBinding]) -> int:
    return len(bindings) * SLOT_SIZE


class DmaController:
    """
    Keeps conveyor slots and registers coherent. Every `dma_period` interpreter
    steps: changed slots are written to their registers, then every register
    is read back into its slot, so the register wins on a simultaneous change.
    Costs go to the `dma` category only.
    """

    def __init__(
        self,
        bus: RegisterFile,
        bindings: List[RegisterBinding],
        memory: LinearMemory,
        conveyor: ConveyorRegion,
        ledger: StepLedger,
        costs: CostModel,
    ):
        self.bus = bus
        self.bindings = bindings
        self.memory = memory
        self.conveyor = conveyor
        self.ledger = ledger
        self.costs = costs
        self.pinned: Set[int] = set()
        self.syncs = 0
        self._last: List[int] = [0] * len(conveyor.slots)
        self._pending_steps = 0
        self._attached = False

    def attach(self) -> None:
        """dma_attach: prime every slot from its register and start periodic synchronization."""
        if self._attached:
            return
        self._read_back()
        self.ledger.on_interp(self._on_interp)
        self._attached = True

    def _on_interp(self, steps: int) -> None:
        self._pending_steps += steps
        period = max(1, self.conveyor.dma_period)
        if self._pending_steps >= period:
            self._pending_steps %= period
            self.sync()

    def _slot_addr(self, slot: ConveyorSlot) -> int:
        return self.conveyor.base + slot.offset

    def sync(self) -> None:
        """dma_sync: push changed slots, then refresh every unpinned slot."""
        for slot in self.conveyor.slots:
            if slot.binding_index in self.pinned:
                continue
            current = self.memory.load(self._slot_addr(slot), slot.width)
            if current != self._last[slot.binding_index]:
                masked_write(self.bus, self.bindings[slot.binding_index], current)
                self.ledger.charge("dma", self.costs.dma_word)
        self._read_back()
        self.syncs += 1

    def _read_back(self) -> None:
        for slot in self.conveyor.slots:
            if slot.binding_index in self.pinned:
                continue
            value = masked_read(self.bus, self.bindings[slot.binding_index])
            self.ledger.charge("dma", self.costs.dma_word)
            self.memory.store(self._slot_addr(slot), slot.width, value)
            self._last[slot.binding_index] = value

    def pin(self, binding_index: int, value: int) -> None:
        slot = self.conveyor.slots[binding_index]
        self.memory.store(self._slot_addr(slot), slot.width, value)
        self.pinned.add(binding_index)

    def unpin(self, binding_index: int) -> None:
        """Release a pinned slot; whatever it holds now counts as already synchronized."""
        if binding_index not in self.pinned:
            return
        slot = self.conveyor.slots[binding_index]
        self._last[binding_index] = self.memory.load(self._slot_addr(slot), slot.width)
        self.pinned.discard(binding_index)


# ---------------------------------------------------------------------------
# Service port
# ---------------------------------------------------------------------------

IrqRegistrar = Callable[[str, str, int, int, Tuple[CopyDescriptor, ...]], int]


class ServicePort:
    """The access paths of one loaded service."""

    def __init__(
        self,
        resolved: ResolvedService,
        mode: AccessMode,
        trust: TrustMode,
        bus: RegisterFile,
        ledger: StepLedger,
        costs: Optional[CostModel] = None,
    ):
        self.service_id = resolved.service_id
        self.resolved = resolved
        self.bindings = resolved.bindings
        self.mode = mode
        self.trust = trust
        self.bus = bus
        self.ledger = ledger
        self.costs = costs or CostModel()
        self.instance: Optional[ModuleInstance] = None
        self.conveyor: Optional[ConveyorRegion] = None
        self.dma: Optional[DmaController] = None
        self.irq_registrar: Optional[IrqRegistrar] = None
        # dummy address -> snapshot value, live only while an epilogue runs
        self.snapshots: Dict[int, int] = {}
        self._pinned: List[int] = []
        self.accesses = 0

    # -- cost helpers --------------------------------------------------------

    @property
    def untrusted(self) -> bool:
        return self.trust is TrustMode.UNTRUSTED

    def enter(self) -> None:
        if self.untrusted:
            self.ledger.charge("context_switch", self.costs.context_switch)

    def exit(self) -> None:
        if self.untrusted:
            self.ledger.charge("context_switch", self.costs.context_switch)

    def _read(self, binding: RegisterBinding) -> int:
        self.ledger.charge("driver", self.costs.bus_access)
        self.accesses += 1
        return masked_read(self.bus, binding)

    def _write(self, binding: RegisterBinding, value: int) -> None:
        self.ledger.charge("driver", self.costs.bus_access)
        self.accesses += 1
        masked_write(self.bus, binding, value)

    def _scan_label(self, label: str, labels: List[str]) -> int:
        """Linear scan; costs position + 1 checks on a hit and len(labels) on a miss."""
        for position, candidate in enumerate(labels):
            if candidate == label:
                self.ledger.charge("wasmio_check", position + 1)
                return position
        self.ledger.charge("wasmio_check", len(labels))
        return -1

    # -- RAPI ----------------------------------------------------------------

    def rapi_handle(self, label: str) -> int:
        if self.mode not in (AccessMode.RAPI, AccessMode.RAPI_DMA):
            return -1
        index = self._scan_label(label, [b.label for b in self.bindings])
        if index < 0:
            return -1
        if self.mode is AccessMode.RAPI_DMA and self.conveyor is not None:
            return self.conveyor.address_of(index)
        return index

    def _valid_handle(self, handle: int) -> bool:
        self.ledger.charge("wasmio_check", 1)
        return self.mode is AccessMode.RAPI and 0 <= handle < len(self.bindings)

    def rapi_read(self, handle: int) -> int:
        if not self._valid_handle(handle):
            return -1
        return self._read(self.bindings[handle])

    def rapi_write(self, handle: int, value: int) -> int:
        if not self._valid_handle(handle):
            return -1
        self._write(self.bindings[handle], value)
        return 0

    # -- OSAPI ---------------------------------------------------------------

    def osapi_handle(self, label: str) -> int:
        return self._scan_label(label, [d.label for d in self.resolved.devices])

    def osapi_call(self, handle: int, op: int, a0: int, a1: int, a2: int) -> int:
        self.ledger.charge("wasmio_check", 1)
        if not 0 <= handle < len(self.resolved.devices):
            return -1
        device = self.bus.device(self.resolved.devices[handle].label)
        # the extra kernel-level driver call
        self.ledger.charge("driver", self.costs.kernel_call)

        if device.kind == "gpio" and op in (OP_GPIO_SET, OP_GPIO_GET):
            if not 0 <= a0 < device.pins:
                return -1
            self.ledger.charge("driver", self.costs.gpio_driver)
            if op == OP_GPIO_GET:
                self.ledger.charge("driver", self.costs.bus_access)
                return self.bus.bus_read(device.base + GPIO_IDR) >> a0 & 1
            current = self.bus.peek(device.base + GPIO_ODR)
            updated = current | (1 << a0) if a1 else current & ~(1 << a0)
            self.ledger.charge("driver", self.costs.bus_access)
            self.bus.bus_write(device.base + GPIO_ODR, 4, updated & MASK32)
            self.accesses += 1
            return 0

        if device.kind == "spi" and op == OP_SPI_TRANSFER:
            return self._spi_transfer(device, a0, a1)
        return -1

    def _spi_transfer(self, device, offset: int, length: int) -> int:
        memory = self.instance.memory if self.instance is not None else None
        if memory is None or length <= 0 or length % 2:
            return -1
        payload = memory.read_bytes(offset, length)
        if payload is None:
            return -1
        if self.untrusted:
            # buffer copied into kernel space before the driver runs
            self.ledger.charge("context_switch", self.costs.osapi_buffer_copy * length)
        for i in range(0, length, 2):
            self._wait_txe(device)
            self.ledger.charge("driver", self.costs.spi_driver_word)
            self.ledger.charge("driver", self.costs.bus_access)
            self.bus.bus_write(device.base + SPI_DR, 4, int.from_bytes(payload[i:i + 2], "little"))
            self.accesses += 1
        self._wait_txe(device)
        return 0

    def _wait_txe(self, device) -> None:
        while not self.bus.peek(device.base + SPI_SR) & SPI_SR_TXE:
            done = device.next_event(self.bus.clock.now)
            self.ledger.charge("driver", max(1, (done or 0) - self.bus.clock.now))

    # -- MMIO ----------------------------------------------------------------

    def mmio_intercept(self, inst: ModuleInstance, addr: int, width: int, kind: str, value: Optional[int]) -> Optional[int]:
        """
        Reauthorize a failed bounds check as register I/O when `addr` is one of
        this service's dummy registers with the same width. None means Unhandled.
        """
        if self.mode is not AccessMode.MMIO:
            return None
        self.ledger.charge("interp", self.costs.mmio_fault_path)
        index, comparisons = self.resolved.lookup_dummy(addr)
        self.ledger.charge("wasmio_check", comparisons)
        if index is None or self.bindings[index].width != width:
            return None

        binding = self.bindings[index]
        self.enter()
        if self.untrusted:
            self.ledger.charge("context_switch", self.costs.bookkeeping_copy)
        try:
            if kind == "read":
                if addr in self.snapshots:
                    return self.snapshots[addr]
                return self._read(binding)
            self._write(binding, value or 0)
            return 0
        finally:
            self.exit()

    # -- epilogue snapshots --------------------------------------------------

    def deliver_copies(self, copies: List[Tuple[CopyDescriptor, int]]) -> int:
        """
        Materialize prologue-time values for an epilogue of this service.
        Returns the number of copies delivered.
        """
        delivered = 0
        for copy, value in copies:
            value &= _width_mask(copy.width)
            if self.mode.copies_to_memory:
                memory = self.instance.memory if self.instance is not None else None
                if memory is None or copy.dest + copy.width > memory.data_size:
                    logger.warning(
                        f"Copy destination outside linear memory | Service: {self.service_id} | "
                        f"Dest: 0x{copy.dest:x}"
                    )
                    continue
                memory.store(copy.dest, copy.width, value)
            elif self.mode is AccessMode.MMIO:
                self.snapshots[copy.dest] = value
            else:
                index, _ = self.resolved.lookup_dummy(copy.dest)
                if index is None:
                    index = next(
                        (i for i, b in enumerate(self.bindings) if b.label == copy.source_register_label),
                        None,
                    )
                if index is None or self.dma is None:
                    continue
                self.dma.pin(index, value)
                self._pinned.append(index)
            delivered += 1
        return delivered

    def end_epilogue(self) -> None:
        self.snapshots.clear()
        if self.dma is not None:
            for index in self._pinned:
                self.dma.unpin(index)
        self._pinned = []


# ---------------------------------------------------------------------------
# Host imports
# ---------------------------------------------------------------------------

def _read_label(port: ServicePort, env, ptr: int, length: int) -> Optional[str]:
    if length <= 0 or length > MAX_LABEL_BYTES:
        return None
    # label bytes are copied out before any check runs
    raw = env.instance.memory.read_bytes(ptr & MASK32, length)
    if raw is None:
        return None
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return None


def build_linker(port: ServicePort) -> HostLinker:
    """The `env.wio_*` host imports, bound to one service."""
    linker = HostLinker()

    def glued(fn):
        def call(env, *args):
            port.ledger.charge("import_glue", port.costs.import_glue)
            port.enter()
            try:
                return fn(env, *args)
            finally:
                port.exit()
        return call

    def device_handle(env, ptr, length):
        label = _read_label(port, env, ptr, length)
        return -1 if label is None else port.osapi_handle(label)

    def osapi_call(env, handle, op, a0, a1, a2):
        return port.osapi_call(handle, op, a0, a1, a2)

    def rapi_handle(env, ptr, length):
        label = _read_label(port, env, ptr, length)
        return -1 if label is None else port.rapi_handle(label)

    def rapi_read(env, handle):
        return port.rapi_read(handle)

    def rapi_write(env, handle, value):
        return port.rapi_write(handle, value)

    def irq_register(env, ptr, length, priority, func_index):
        label = _read_label(port, env, ptr, length)
        if label is None or port.irq_registrar is None:
            return -1
        return port.irq_registrar(port.service_id, label, priority, func_index, ())

    linker.define("env", "wio_device_handle", 2, 1, glued(device_handle))
    linker.define("env", "wio_osapi_call", 5, 1, glued(osapi_call))
    linker.define("env", "wio_rapi_handle", 2, 1, glued(rapi_handle))
    linker.define("env", "wio_rapi_read", 1, 1, glued(rapi_read))
    linker.define("env", "wio_rapi_write", 2, 1, glued(rapi_write))
    linker.define("env", "wio_irq_register", 4, 1, glued(irq_register))
    return linker
