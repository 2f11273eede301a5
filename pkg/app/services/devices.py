"""
Simulated hardware: the register bus with its event trace, the GPIO, SPI
and timer peripheral models and the interrupt controller they raise lines on.

Devices never run on their own; they advance analytically whenever the
simulation clock moves.
Pure Python module — no FastAPI imports.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from app.services.errors import IncompleteTransfer, SimulationFault
from app.services.ledger import SimClock

logger = logging.getLogger(__name__)

MASK32 = 0xFFFFFFFF
MAX_IRQ_LINES = 32

# ---- Register maps (offset from the device base) ----
GPIO_IDR = 0x10
GPIO_ODR = 0x14

SPI_CR = 0x00
SPI_SR = 0x08
SPI_DR = 0x0C
SPI_CR_DIVIDER = 0xFFFF
SPI_CR_RXNEIE = 1 << 16
SPI_SR_RXNE = 1 << 0
SPI_SR_TXE = 1 << 1
SPI_SR_OVR = 1 << 6
SPI_WORD_BITS = 16

TIM_SR = 0x10
TIM_CNT = 0x24
TIM_CCR = 0x34
TIM_SR_CCIF = 1 << 1

REGISTER_MAPS: Dict[str, Dict[str, int]] = {
    "gpio": {"IDR": GPIO_IDR, "ODR": GPIO_ODR},
    "spi": {"CR": SPI_CR, "SR": SPI_SR, "DR": SPI_DR},
    "timer": {"SR": TIM_SR, "CNT": TIM_CNT, "CCR": TIM_CCR},
}
DEVICE_KINDS = tuple(REGISTER_MAPS)

IrqSink = Callable[[int, str, int], None]


@dataclass(frozen=True)
class BusEvent:
    step: int
    addr: int
    kind: str  # read | write | set
    value: int


@dataclass(frozen=True)
class _Cell:
    device: "Peripheral"
    name: str
    width: int


# ---------------------------------------------------------------------------
# Peripherals
# ---------------------------------------------------------------------------

class Peripheral:
    kind = "none"

    def __init__(self, label: str, base: int, irq_line: Optional[int] = None):
        self.label = label
        self.base = base
        self.irq_line = irq_line
        self.irq_sink: Optional[IrqSink] = None
        self.values: Dict[str, int] = dict.fromkeys(REGISTER_MAPS.get(self.kind, {}), 0)

    def registers(self) -> Dict[str, int]:
        return {name: self.base + offset for name, offset in REGISTER_MAPS[self.kind].items()}

    def read(self, name: str, now: int) -> int:
        return self.values[name]

    def write(self, name: str, value: int, now: int) -> None:
        self.values[name] = value & MASK32

    def peek(self, name: str, now: int) -> int:
        """Register value without read side effects."""
        return self.values[name]

    def poke(self, name: str, value: int, now: int) -> None:
        """External change of a register (pin input, scenario mutation)."""
        self.values[name] = value & MASK32

    def advance(self, now: int) -> None:
        pass

    def next_event(self, now: int) -> Optional[int]:
        return None

    def _raise(self, at_step: int) -> None:
        if self.irq_line is not None and self.irq_sink is not None:
            self.irq_sink(self.irq_line, self.label, at_step)


class GpioBank(Peripheral):
    """Output data register drives the pins; input data register samples them."""

    kind = "gpio"

    def __init__(self, label: str, base: int, pins: int = 16, irq_line: Optional[int] = None):
        if not 1 <= pins <= 32:
            raise ValueError(f"GPIO bank '{label}' pin count {pins} is outside 1..32")
        super().__init__(label, base, irq_line)
        self.pins = pins
        self.pin_mask = (1 << pins) - 1
        # (step, pin, level) for every observed pin change
        self.pin_events: List[Tuple[int, int, int]] = []
        self.listeners: List[Callable[[int, int, int], None]] = []

    def write(self, name: str, value: int, now: int) -> None:
        if name == "IDR":
            return
        old = self.values["ODR"]
        new = value & self.pin_mask
        self.values["ODR"] = new
        changed = old ^ new
        for pin in range(self.pins):
            if changed >> pin & 1:
                self.pin_events.append((now, pin, new >> pin & 1))
                for listener in self.listeners:
                    listener(now, pin, new >> pin & 1)

    def pin_level(self, pin: int) -> int:
        return self.values["ODR"] >> pin & 1

    def drive_input(self, pin: int, level: int) -> None:
        if level:
            self.values["IDR"] |= 1 << pin
        else:
            self.values["IDR"] &= ~(1 << pin) & MASK32

    def first_rise(self, pin: int, after: int = 0) -> Optional[int]:
        for step, p, level in self.pin_events:
            if p == pin and level and step >= after:
                return step
        return None


@dataclass(frozen=True)
class WireWord:
    start: int
    done: int
    word: int


class SpiController(Peripheral):
    """
    Transmit-only SPI with loopback receive. A data-register write while TXE
    is clear is dropped and sets OVR.
    """

    kind = "spi"

    def __init__(self, label: str, base: int, divider: int = 2, irq_line: Optional[int] = None):
        super().__init__(label, base, irq_line)
        self.values["CR"] = divider & SPI_CR_DIVIDER
        self.values["SR"] = SPI_SR_TXE
        self._busy: Optional[WireWord] = None
        self.wire: List[WireWord] = []

    @property
    def divider(self) -> int:
        return max(1, self.values["CR"] & SPI_CR_DIVIDER)

    @property
    def cycles_per_word(self) -> int:
        return self.divider * SPI_WORD_BITS

    def read(self, name: str, now: int) -> int:
        if name == "DR":
            self.values["SR"] &= ~SPI_SR_RXNE & MASK32
        return self.values[name]

    def write(self, name: str, value: int, now: int) -> None:
        if name == "SR":
            # OVR is cleared by writing 0; RXNE and TXE are read-only
            if not value & SPI_SR_OVR:
                self.values["SR"] &= ~SPI_SR_OVR & MASK32
            return
        if name == "CR":
            self.values["CR"] = value & (SPI_CR_DIVIDER | SPI_CR_RXNEIE)
            return
        if not self.values["SR"] & SPI_SR_TXE:
            self.values["SR"] |= SPI_SR_OVR
            return
        word = value & ((1 << SPI_WORD_BITS) - 1)
        self.values["SR"] &= ~SPI_SR_TXE & MASK32
        self._busy = WireWord(now, now + self.cycles_per_word, word)

    def advance(self, now: int) -> None:
        busy = self._busy
        if busy is None or now < busy.done:
            return
        self._busy = None
        self.wire.append(busy)
        self.values["DR"] = busy.word
        self.values["SR"] |= SPI_SR_RXNE | SPI_SR_TXE
        if self.values["CR"] & SPI_CR_RXNEIE:
            self._raise(busy.done)

    def next_event(self, now: int) -> Optional[int]:
        return self._busy.done if self._busy is not None else None


class TimerDevice(Peripheral):
    """Free-running counter equal to the simulation step; fires once when it reaches CCR."""

    kind = "timer"

    def __init__(self, label: str, base: int, compare: int = 0, irq_line: Optional[int] = None):
        super().__init__(label, base, irq_line)
        self.values["CCR"] = compare & MASK32
        self._armed = compare > 0
        self.fired_at: List[int] = []

    def read(self, name: str, now: int) -> int:
        if name == "CNT":
            return now & MASK32
        return self.values[name]

    def peek(self, name: str, now: int) -> int:
        return self.read(name, now)

    def write(self, name: str, value: int, now: int) -> None:
        if name == "CNT":
            return
        if name == "SR":
            if not value & TIM_SR_CCIF:
                self.values["SR"] &= ~TIM_SR_CCIF & MASK32
            return
        self.values["CCR"] = value & MASK32
        self._armed = self.values["CCR"] > now

    def poke(self, name: str, value: int, now: int) -> None:
        super().poke(name, value, now)
        if name == "CCR":
            self._armed = self.values["CCR"] > now

    def advance(self, now: int) -> None:
        if self._armed and now >= self.values["CCR"]:
            self._armed = False
            at_step = self.values["CCR"]
            self.values["SR"] |= TIM_SR_CCIF
            self.fired_at.append(at_step)
            self._raise(at_step)

    def next_event(self, now: int) -> Optional[int]:
        return self.values["CCR"] if self._armed else None


def make_device(label: str, kind: str, base: int, params: Dict[str, int], irq_line: Optional[int] = None) -> Peripheral:
    if kind == "gpio":
        return GpioBank(label, base, params.get("pins", 16), irq_line)
    if kind == "spi":
        return SpiController(label, base, params.get("divider", 2), irq_line)
    if kind == "timer":
        return TimerDevice(label, base, params.get("compare", 0), irq_line)
    raise ValueError(f"Unknown device kind '{kind}'")


# ---------------------------------------------------------------------------
# Register bus
# ---------------------------------------------------------------------------

class RegisterFile:
    """
    Address-decoded register bus. Every bus access is appended to `trace`;
    reads are left out when `record_reads` is off.
    """

    def __init__(self, clock: Optional[SimClock] = None):
        self.clock = clock if clock is not None else SimClock()
        self.devices: List[Peripheral] = []
        self._cells: Dict[int, _Cell] = {}
        self.trace: List[BusEvent] = []
        self.record_reads = True
        self.clock.subscribe(self._on_advance)

    def attach(self, device: Peripheral, width: int = 4) -> None:
        for name, addr in device.registers().items():
            if addr in self._cells:
                raise SimulationFault(f"Register 0x{addr:08x} of '{device.label}' is already mapped", addr)
            self._cells[addr] = _Cell(device, name, width)
        self.devices.append(device)
        logger.debug(f"Device attached: {device.label} | Kind: {device.kind} | Base: 0x{device.base:08x}")

    def device(self, label: str) -> Peripheral:
        for dev in self.devices:
            if dev.label == label:
                return dev
        raise SimulationFault(f"No device labelled '{label}'")

    def owns(self, addr: int) -> bool:
        return addr in self._cells

    def _cell(self, addr: int) -> _Cell:
        cell = self._cells.get(addr)
        if cell is None:
            raise SimulationFault(f"Bus access to unmapped address 0x{addr:08x}", addr)
        return cell

    def _on_advance(self, now: int) -> None:
        for device in self.devices:
            device.advance(now)

    def bus_read(self, addr: int, width: int = 4, step: Optional[int] = None) -> int:
        cell = self._cell(addr)
        now = self.clock.now if step is None else step
        value = cell.device.read(cell.name, now) & ((1 << (8 * width)) - 1)
        if self.record_reads:
            self.trace.append(BusEvent(now, addr, "read", value))
        return value

    def bus_write(self, addr: int, width: int, value: int, step: Optional[int] = None) -> None:
        cell = self._cell(addr)
        now = self.clock.now if step is None else step
        value &= (1 << (8 * width)) - 1
        cell.device.write(cell.name, value, now)
        self.trace.append(BusEvent(now, addr, "write", value))

    def peek(self, addr: int) -> int:
        cell = self._cell(addr)
        return cell.device.peek(cell.name, self.clock.now)

    def poke(self, addr: int, value: int) -> None:
        cell = self._cell(addr)
        cell.device.poke(cell.name, value, self.clock.now)
        self.trace.append(BusEvent(self.clock.now, addr, "set", value & MASK32))

    def writes(self) -> List[Tuple[int, int]]:
        return [(e.addr, e.value) for e in self.trace if e.kind == "write"]

    def next_event(self) -> Optional[int]:
        now = self.clock.now
        steps = [s for s in (d.next_event(now) for d in self.devices) if s is not None]
        return min(steps) if steps else None


# ---------------------------------------------------------------------------
# Interrupt controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LineRaise:
    at_step: int
    seq: int
    line: int
    label: str


class InterruptController:
    """Holds raised lines until the scheduler collects them at an instruction boundary."""

    def __init__(self, lines: int = MAX_IRQ_LINES):
        self.lines = lines
        self._scheduled: List[LineRaise] = []
        self._seq = 0

    def raise_line(self, line: int, label: str, at_step: int) -> None:
        if not 0 <= line < self.lines:
            raise SimulationFault(f"Interrupt line {line} does not exist")
        self._scheduled.append(LineRaise(at_step, self._seq, line, label))
        self._seq += 1
        self._scheduled.sort(key=lambda r: (r.at_step, r.seq))

    def due(self, now: int) -> List[LineRaise]:
        ready = [r for r in self._scheduled if r.at_step <= now]
        if ready:
            self._scheduled = [r for r in self._scheduled if r.at_step > now]
        return ready

    def next_step(self) -> Optional[int]:
        return self._scheduled[0].at_step if self._scheduled else None

    @property
    def idle(self) -> bool:
        return not self._scheduled


def spi_effective_rate(wire: List[WireWord], word_count: int, cycles_per_word: int) -> float:
    """
    Measured over configured data rate: the ideal transfer time of
    `word_count` words divided by the time from the first data-register
    write to the completion of the last word.
    """
    if word_count <= 0:
        raise IncompleteTransfer(f"Word count must be positive, got {word_count}")
    if len(wire) < word_count:
        raise IncompleteTransfer(f"Only {len(wire)} of {word_count} words reached the wire")
    elapsed = wire[word_count - 1].done - wire[0].start
    if elapsed <= 0:
        raise IncompleteTransfer("Transfer has no measurable duration")
    return (word_count * cycles_per_word) / elapsed
