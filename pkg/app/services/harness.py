"""
Measurement scenarios: GPIO roundtrip, interrupt latency, SPI rate sweep and
register-count scaling, plus the step-ledger CSV report.

Every scenario builds a fresh machine, generates its service binary and
measures in simulation steps, so repeated runs are byte-identical.
Pure Python module — no FastAPI imports.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from app.services.access import AccessMode, TrustMode
from app.services.devices import TIM_SR_CCIF, spi_effective_rate
from app.services.errors import ScenarioError
from app.services.ledger import CATEGORIES, CostModel
from app.services.platform import PlatformDescription, parse_platform
from app.services.programs import (
    OBSERVED,
    gpio_roundtrip_program,
    irq_latency_program,
    register_probe_program,
    spi_transfer_program,
)
from app.services.runtime import Machine

logger = logging.getLogger(__name__)

BENCH_SERVICE = "bench"
ROUNDTRIP_PIN = 3
LATENCY_PIN = 5
# steps between the end of service setup and the timer compare
ARM_DELAY = 100
DEFAULT_DIVIDERS = (2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048)
DEFAULT_SCALING_COUNTS = (1, 4, 8, 16, 32)
REPORT_COLUMNS = ["scenario", "mode", "trust", "category", "phase", "steps"]
SWEEP_COLUMNS = ["mode", "trust", "divider", "configured_fraction", "measured_fraction"]
SCENARIOS = ("gpio-roundtrip", "irq-latency", "spi-rate", "register-scaling")

BENCH_PLATFORM = """\
# Bench board: one GPIO bank, a compare timer and an SPI controller.
device gpio0 kind=gpio base=0x48000000 pins=16
device tim2 kind=timer base=0x40000000 irq=28
device spi1 kind=spi base=0x40013000 irq=25 divider=2

register gpio0_odr addr=0x48000014 width=4 mask=0xFFFF freq=90
register gpio0_idr addr=0x48000010 width=4 mask=0xFFFF freq=10
register tim2_sr addr=0x40000010 width=4 mask=0x2 freq=20
register tim2_cnt addr=0x40000024 width=4 mask=0xFFFFFFFF freq=5
register tim2_ccr addr=0x40000034 width=4 mask=0xFFFFFFFF freq=5
register spi1_cr addr=0x40013000 width=4 mask=0x1FFFF freq=1
register spi1_sr addr=0x40013008 width=4 mask=0x43 freq=80
register spi1_dr addr=0x4001300C width=4 mask=0xFFFF freq=70

interrupt tim2_cc line=28 clear=tim2_sr:0x0
interrupt spi1_rxne line=25

assign bench gpio0_odr gpio0_idr tim2_sr tim2_cnt tim2_ccr spi1_cr spi1_sr spi1_dr
assign bench gpio0 tim2 spi1 tim2_cc spi1_rxne
"""

PlatformInput = Union[str, PlatformDescription, None]


@dataclass
class ScenarioResult:
    scenario: str
    mode: str
    trust: str
    # phase -> category -> steps
    phases: Dict[str, Dict[str, int]] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    rows: List[Dict[str, float]] = field(default_factory=list)

    @property
    def total(self) -> Dict[str, int]:
        totals = dict.fromkeys(CATEGORIES, 0)
        for counts in self.phases.values():
            for category, steps in counts.items():
                totals[category] += steps
        return totals


def bench_platform() -> PlatformDescription:
    return parse_platform(BENCH_PLATFORM)


def _platform(platform: PlatformInput) -> PlatformDescription:
    if platform is None:
        return bench_platform()
    if isinstance(platform, str):
        return parse_platform(platform)
    return platform


def _phase_counts(machine: Machine, phases: Iterable[str]) -> Dict[str, Dict[str, int]]:
    return {
        phase: dict(machine.ledger.phase_counts.get(phase, dict.fromkeys(CATEGORIES, 0)))
        for phase in phases
    }


# ---------------------------------------------------------------------------
# GPIO roundtrip
# ---------------------------------------------------------------------------

def scenario_gpio_roundtrip(
    platform: PlatformInput,
    mode: AccessMode,
    trust: TrustMode,
    costs: Optional[CostModel] = None,
    pin: int = ROUNDTRIP_PIN,
) -> ScenarioResult:
    """Steps from the first I/O instruction of `toggle` to the pin going high."""
    machine = Machine(_platform(platform), costs)
    machine.load_service(gpio_roundtrip_program(mode, pin), BENCH_SERVICE, mode, trust)
    machine.invoke(BENCH_SERVICE, "setup")

    gpio = machine.device("gpio0")
    ledger = machine.ledger

    def on_pin(step: int, changed: int, level: int) -> None:
        if changed == pin and level and ledger.phase == "to_event":
            ledger.set_phase("return_path")

    gpio.listeners.append(on_pin)
    start = machine.clock.now
    ledger.set_phase("to_event")
    machine.invoke(BENCH_SERVICE, "toggle")
    machine.final_sync()
    ledger.set_phase("main")
    gpio.listeners.remove(on_pin)

    rise = gpio.first_rise(pin, after=start)
    if rise is None:
        raise ScenarioError(f"Measurement pin {pin} never went high in {mode.value} mode")
    result = ScenarioResult(
        "gpio-roundtrip", mode.value, trust.value,
        _phase_counts(machine, ("to_event", "return_path")),
        {"roundtrip_steps": rise - start, "total_steps": machine.clock.now - start},
    )
    logger.info(
        f"GPIO roundtrip | Mode: {mode.value} | Trust: {trust.value} | Steps: {rise - start}"
    )
    return result


# ---------------------------------------------------------------------------
# Interrupt latency
# ---------------------------------------------------------------------------

def scenario_irq_latency(
    platform: PlatformInput,
    mode: AccessMode,
    trust: TrustMode,
    costs: Optional[CostModel] = None,
    pin: int = LATENCY_PIN,
) -> ScenarioResult:
    """
    The timer compare raises tim2_cc; the subscribed handler records the
    flag it observes and sets the measurement pin. Latency is the raise to
    pin-high distance minus the roundtrip of the same mode and trust.
    """
    desc = _platform(platform)
    machine = Machine(desc, costs)
    loaded = machine.load_service(irq_latency_program(mode, pin), BENCH_SERVICE, mode, trust)
    machine.invoke(BENCH_SERVICE, "setup")

    raise_step = machine.clock.now + ARM_DELAY
    machine.set_register("tim2_ccr", raise_step)
    report = machine.run()

    timer = machine.device("tim2")
    if not timer.fired_at:
        raise ScenarioError("Timer compare never fired")
    raised = timer.fired_at[0]
    pin_step = machine.device("gpio0").first_rise(pin, after=raised)
    if pin_step is None:
        raise ScenarioError(f"Handler never set measurement pin {pin} in {mode.value} mode")

    roundtrip = scenario_gpio_roundtrip(desc, mode, trust, costs).metrics["roundtrip_steps"]
    observed = loaded.instance.memory.load(OBSERVED, 4)
    result = ScenarioResult(
        "irq-latency", mode.value, trust.value,
        _phase_counts(machine, ("prologue", "system_epilogue", "wasm_epilogue")),
        {
            "raise_step": raised,
            "pin_step": pin_step,
            "roundtrip_steps": roundtrip,
            "latency_steps": pin_step - raised - roundtrip,
            "observed_flag": observed,
            "expected_flag": TIM_SR_CCIF,
            "handler_runs": len(report.handler_runs(BENCH_SERVICE)),
        },
    )
    logger.info(
        f"IRQ latency | Mode: {mode.value} | Trust: {trust.value} | "
        f"Latency: {result.metrics['latency_steps']} | Observed flag: 0x{observed:x}"
    )
    return result


# ---------------------------------------------------------------------------
# SPI rate sweep
# ---------------------------------------------------------------------------

def spi_rate_point(
    desc: PlatformDescription,
    mode: AccessMode,
    trust: TrustMode,
    divider: int,
    words: int,
    costs: Optional[CostModel] = None,
) -> float:
    """Measured fraction of the configured rate for one divider."""
    machine = Machine(desc, costs)
    machine.bus.record_reads = False
    machine.set_register("spi1_cr", divider)
    machine.load_service(spi_transfer_program(mode, words), BENCH_SERVICE, mode, trust)
    machine.invoke(BENCH_SERVICE, "setup")
    machine.scheduler.add_mainline(BENCH_SERVICE, "transfer")
    machine.run()
    spi = machine.device("spi1")
    return spi_effective_rate(spi.wire, words, spi.cycles_per_word)


def scenario_spi_rate(
    platform: PlatformInput,
    mode: AccessMode,
    trust: TrustMode,
    dividers: Sequence[int] = DEFAULT_DIVIDERS,
    costs: Optional[CostModel] = None,
    words: int = 512,
) -> ScenarioResult:
    """One row per divider: (divider, configured fraction 1/d, measured fraction)."""
    desc = _platform(platform)
    result = ScenarioResult("spi-rate", mode.value, trust.value)
    if not dividers:
        raise ScenarioError("SPI sweep needs at least one divider")
    for divider in sorted(set(dividers)):
        if divider < 1:
            raise ScenarioError(f"SPI divider must be positive, got {divider}")
        measured = spi_rate_point(desc, mode, trust, divider, words, costs)
        result.rows.append({
            "divider": divider,
            "configured_fraction": 1.0 / divider,
            "measured_fraction": measured,
        })
        logger.debug(f"SPI sweep | Mode: {mode.value} | Divider: {divider} | Fraction: {measured:.4f}")
    result.metrics["min_fraction"] = min(r["measured_fraction"] for r in result.rows)
    result.metrics["max_fraction"] = max(r["measured_fraction"] for r in result.rows)
    return result


def sweep_frame(results: Iterable[ScenarioResult]) -> pd.DataFrame:
    rows = [
        {"mode": r.mode, "trust": r.trust, **row}
        for r in results
        for row in r.rows
    ]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def write_sweep(results: Iterable[ScenarioResult], path: str) -> None:
    sweep_frame(results).to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Register-count scaling
# ---------------------------------------------------------------------------

def scaling_platform(count: int) -> str:
    """`count` GPIO registers over ceil(count / 2) banks, frequencies strictly descending."""
    lines = []
    for bank in range((count + 1) // 2):
        lines.append(f"device g{bank:02d} kind=gpio base=0x{0x50000000 + 0x400 * bank:08x}")
    labels = []
    for i in range(count):
        bank, offset = divmod(i, 2)
        addr = 0x50000000 + 0x400 * bank + (0x14 if offset == 0 else 0x10)
        label = f"reg{i:02d}"
        labels.append(label)
        lines.append(f"register {label} addr=0x{addr:08x} width=4 mask=0xFFFF freq={100 - i}")
    lines.append(f"assign {BENCH_SERVICE} " + " ".join(labels))
    return "\n".join(lines) + "\n"


def scenario_register_scaling(
    counts: Sequence[int] = DEFAULT_SCALING_COUNTS,
    mode: AccessMode = AccessMode.MMIO,
    trust: TrustMode = TrustMode.TRUSTED,
    costs: Optional[CostModel] = None,
) -> ScenarioResult:
    """Check steps for the last sorted binding, fitted linearly against the register count."""
    if mode not in (AccessMode.MMIO, AccessMode.RAPI, AccessMode.RAPI_DMA):
        raise ScenarioError(f"Register scaling is measured through dummy lookups or handles, not {mode.value}")
    result = ScenarioResult("register-scaling", mode.value, trust.value)
    for count in counts:
        machine = Machine(parse_platform(scaling_platform(count)), costs)
        labels = [f"reg{i:02d}" for i in range(count)]
        machine.load_service(register_probe_program(mode, labels, labels[-1]), BENCH_SERVICE, mode, trust)
        before = machine.ledger.counts["wasmio_check"]
        machine.invoke(BENCH_SERVICE, "probe")
        result.rows.append({"registers": count, "check_steps": machine.ledger.counts["wasmio_check"] - before})

    x = np.array([[r["registers"]] for r in result.rows], dtype=float)
    y = np.array([r["check_steps"] for r in result.rows], dtype=float)
    fit = LinearRegression().fit(x, y)
    result.metrics["slope"] = float(round(fit.coef_[0], 9))
    result.metrics["intercept"] = float(round(fit.intercept_, 9))
    logger.info(
        f"Register scaling | Mode: {mode.value} | Slope: {result.metrics['slope']} | "
        f"Intercept: {result.metrics['intercept']}"
    )
    return result


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def report_frame(results: Iterable[ScenarioResult]) -> pd.DataFrame:
    rows = []
    for result in results:
        for phase, counts in result.phases.items():
            for category in CATEGORIES:
                rows.append({
                    "scenario": result.scenario, "mode": result.mode, "trust": result.trust,
                    "category": category, "phase": phase, "steps": counts.get(category, 0),
                })
        for name, value in result.metrics.items():
            rows.append({
                "scenario": result.scenario, "mode": result.mode, "trust": result.trust,
                "category": "metric", "phase": name, "steps": value,
            })
    # object dtype keeps integer step counts integral next to float metrics
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS, dtype=object)
    if frame.empty:
        return frame
    return frame.sort_values(
        ["scenario", "mode", "trust", "category", "phase"], kind="mergesort"
    ).reset_index(drop=True)


def report_write(results: Iterable[ScenarioResult], path: str) -> None:
    """Write the step-ledger report as CSV with LF line endings."""
    report_frame(results).to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Report written: {path}")


def run_scenario(
    name: str,
    platform: PlatformInput,
    mode: AccessMode,
    trust: TrustMode,
    costs: Optional[CostModel] = None,
    dividers: Sequence[int] = DEFAULT_DIVIDERS,
    words: int = 512,
) -> ScenarioResult:
    if name == "gpio-roundtrip":
        return scenario_gpio_roundtrip(platform, mode, trust, costs)
    if name == "irq-latency":
        return scenario_irq_latency(platform, mode, trust, costs)
    if name == "spi-rate":
        return scenario_spi_rate(platform, mode, trust, dividers, costs, words)
    if name == "register-scaling":
        return scenario_register_scaling(mode=mode, trust=trust, costs=costs)
    raise ScenarioError(f"Unknown scenario '{name}' (expected one of {list(SCENARIOS)})")
