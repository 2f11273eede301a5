import sys
import os

# Add the parent directory to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.services.devices import (
    SPI_SR_OVR,
    SPI_SR_RXNE,
    SPI_SR_TXE,
    TIM_SR_CCIF,
    GpioBank,
    InterruptController,
    RegisterFile,
    SpiController,
    TimerDevice,
    WireWord,
    make_device,
    spi_effective_rate,
)
from app.services.errors import IncompleteTransfer, SimulationFault
from app.services.ledger import SimClock

GPIO = 0x48000000
SPI = 0x40013000
TIM = 0x40000000


def _bus():
    clock = SimClock()
    bus = RegisterFile(clock)
    return clock, bus


def test_gpio_output_and_listeners():
    print("Testing GPIO bank...")
    clock, bus = _bus()
    gpio = GpioBank("gpio0", GPIO, pins=8)
    bus.attach(gpio)
    seen = []
    gpio.listeners.append(lambda now, pin, level: seen.append((now, pin, level)))

    clock.advance(5)
    bus.bus_write(GPIO + 0x14, 4, 0x1FF)
    # only the 8 modelled pins are kept
    assert bus.peek(GPIO + 0x14) == 0xFF
    assert seen[0] == (5, 0, 1) and len(seen) == 8
    clock.advance(3)
    bus.bus_write(GPIO + 0x14, 4, 0xF7)
    assert seen[-1] == (8, 3, 0)
    assert gpio.pin_level(3) == 0
    assert gpio.first_rise(3) == 5
    assert gpio.first_rise(3, after=6) is None

    # IDR ignores writes; pin inputs come from outside
    bus.bus_write(GPIO + 0x10, 4, 0xFFFF)
    assert bus.bus_read(GPIO + 0x10) == 0
    gpio.drive_input(2, 1)
    assert bus.bus_read(GPIO + 0x10) == 0x4
    try:
        GpioBank("bad", 0, pins=40)
        assert False, "expected ValueError"
    except ValueError:
        pass
    print("✓ GPIO bank passed")


def test_bus_trace_and_faults():
    print("Testing register bus trace...")
    clock, bus = _bus()
    bus.attach(GpioBank("gpio0", GPIO))
    clock.advance(2)
    bus.bus_write(GPIO + 0x14, 4, 0x1)
    bus.bus_read(GPIO + 0x14)
    bus.record_reads = False
    bus.bus_read(GPIO + 0x14)
    bus.poke(GPIO + 0x10, 0x8)
    assert [(e.step, e.kind, e.value) for e in bus.trace] == [(2, "write", 1), (2, "read", 1), (2, "set", 8)]
    assert bus.writes() == [(GPIO + 0x14, 1)]
    assert bus.owns(GPIO + 0x14) and not bus.owns(GPIO + 0x18)

    try:
        bus.bus_read(0x12345678)
        assert False, "expected SimulationFault"
    except SimulationFault as e:
        assert e.addr == 0x12345678
    try:
        bus.attach(GpioBank("clash", GPIO))
        assert False, "expected SimulationFault"
    except SimulationFault:
        pass
    try:
        bus.device("uart0")
        assert False, "expected SimulationFault"
    except SimulationFault:
        pass
    print("✓ Register bus trace passed")


def test_spi_word_timing():
    print("Testing SPI word timing...")
    clock, bus = _bus()
    spi = SpiController("spi1", SPI, divider=4)
    bus.attach(spi)
    assert spi.cycles_per_word == 64
    assert bus.bus_read(SPI + 0x08) == SPI_SR_TXE

    clock.advance(10)
    bus.bus_write(SPI + 0x0C, 4, 0xBEEF)
    assert bus.bus_read(SPI + 0x08) == 0
    assert bus.next_event() == 74
    clock.advance(63)
    assert not spi.wire
    clock.advance(1)
    assert spi.wire == [WireWord(10, 74, 0xBEEF)]
    assert bus.bus_read(SPI + 0x08) == SPI_SR_TXE | SPI_SR_RXNE
    # loopback receive; reading DR clears RXNE
    assert bus.bus_read(SPI + 0x0C) == 0xBEEF
    assert bus.bus_read(SPI + 0x08) == SPI_SR_TXE
    assert bus.next_event() is None
    print("✓ SPI word timing passed")


def test_spi_overrun():
    print("Testing SPI overrun...")
    clock, bus = _bus()
    spi = SpiController("spi1", SPI, divider=2)
    bus.attach(spi)
    bus.bus_write(SPI + 0x0C, 4, 1)
    bus.bus_write(SPI + 0x0C, 4, 2)
    assert bus.bus_read(SPI + 0x08) & SPI_SR_OVR
    clock.advance(32)
    # the dropped word never reaches the wire
    assert [w.word for w in spi.wire] == [1]
    bus.bus_write(SPI + 0x08, 4, 0)
    assert not bus.bus_read(SPI + 0x08) & SPI_SR_OVR
    print("✓ SPI overrun passed")


def test_spi_rxne_interrupt():
    print("Testing SPI receive interrupt...")
    clock, bus = _bus()
    spi = SpiController("spi1", SPI, divider=1, irq_line=25)
    bus.attach(spi)
    raised = []
    spi.irq_sink = lambda line, label, at: raised.append((line, label, at))
    bus.bus_write(SPI + 0x00, 4, (1 << 16) | 1)
    bus.bus_write(SPI + 0x0C, 4, 7)
    clock.advance(100)
    assert raised == [(25, "spi1", 16)]
    print("✓ SPI receive interrupt passed")


def test_timer_compare():
    print("Testing timer compare...")
    clock, bus = _bus()
    timer = TimerDevice("tim2", TIM, irq_line=28)
    bus.attach(timer)
    raised = []
    timer.irq_sink = lambda line, label, at: raised.append((line, label, at))
    assert bus.next_event() is None

    clock.advance(7)
    assert bus.bus_read(TIM + 0x24) == 7
    bus.bus_write(TIM + 0x34, 4, 50)
    assert bus.next_event() == 50
    clock.advance(100)
    # the raise carries the compare step, not the step the clock jumped to
    assert raised == [(28, "tim2", 50)]
    assert timer.fired_at == [50]
    assert bus.peek(TIM + 0x10) & TIM_SR_CCIF
    clock.advance(100)
    assert len(raised) == 1

    bus.bus_write(TIM + 0x10, 4, 0)
    assert bus.peek(TIM + 0x10) == 0
    # a compare value already in the past does not arm
    bus.bus_write(TIM + 0x34, 4, 10)
    assert bus.next_event() is None
    bus.poke(TIM + 0x34, 300)
    assert bus.next_event() == 300
    print("✓ Timer compare passed")


def test_make_device():
    print("Testing device factory...")
    assert make_device("g", "gpio", GPIO, {"pins": 4}).pins == 4
    assert make_device("s", "spi", SPI, {"divider": 8}).divider == 8
    assert make_device("t", "timer", TIM, {}, 28).irq_line == 28
    try:
        make_device("u", "uart", 0, {})
        assert False, "expected ValueError"
    except ValueError:
        pass
    print("✓ Device factory passed")


def test_interrupt_controller_ordering():
    print("Testing interrupt controller...")
    intc = InterruptController()
    intc.raise_line(3, "b", 20)
    intc.raise_line(1, "a", 10)
    intc.raise_line(2, "c", 20)
    assert intc.next_step() == 10
    assert intc.due(5) == []
    assert [r.label for r in intc.due(20)] == ["a", "b", "c"]
    assert intc.idle
    try:
        intc.raise_line(32, "x", 0)
        assert False, "expected SimulationFault"
    except SimulationFault:
        pass
    print("✓ Interrupt controller passed")


def test_spi_effective_rate():
    print("Testing SPI effective rate...")
    wire = [WireWord(0, 32, 1), WireWord(32, 64, 2)]
    assert spi_effective_rate(wire, 2, 32) == 1.0
    gappy = [WireWord(0, 32, 1), WireWord(96, 128, 2)]
    assert spi_effective_rate(gappy, 2, 32) == 0.5
    for args in ((wire, 3, 32), (wire, 0, 32), ([WireWord(5, 5, 0)], 1, 32)):
        try:
            spi_effective_rate(*args)
            assert False, "expected IncompleteTransfer"
        except IncompleteTransfer:
            pass
    print("✓ SPI effective rate passed")


if __name__ == "__main__":
    try:
        test_gpio_output_and_listeners()
        test_bus_trace_and_faults()
        test_spi_word_timing()
        test_spi_overrun()
        test_spi_rxne_interrupt()
        test_timer_compare()
        test_make_device()
        test_interrupt_controller_ordering()
        test_spi_effective_rate()
        print("\nAll device tests passed successfully!")
    except Exception as e:
        print(f"\nTests failed: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
