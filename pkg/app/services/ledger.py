"""
Deterministic step accounting: the simulation clock, the categorized
step ledger and the cost model that prices every path.
Pure Python module — no FastAPI imports.
"""

import dataclasses
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from app.services.errors import ConfigError, ParseError

CATEGORIES = ("interp", "wasmio_check", "driver", "context_switch", "dma", "import_glue", "irq")

# the DMA controller runs beside the CPU and never advances the clock
CPU_CATEGORIES = tuple(c for c in CATEGORIES if c != "dma")


class SimClock:
    """Global step counter; devices subscribe to observe time passing."""

    def __init__(self):
        self.now = 0
        self._listeners: List[Callable[[int], None]] = []

    def subscribe(self, listener: Callable[[int], None]) -> None:
        self._listeners.append(listener)

    def advance(self, steps: int) -> None:
        self.now += steps
        for listener in self._listeners:
            listener(self.now)

    def advance_to(self, step: int) -> None:
        if step > self.now:
            self.advance(step - self.now)


class StepLedger:
    def __init__(self, clock: Optional[SimClock] = None):
        self.counts: Dict[str, int] = dict.fromkeys(CATEGORIES, 0)
        self.clock = clock if clock is not None else SimClock()
        self._interp_listeners: List[Callable[[int], None]] = []
        # every charge is also attributed to the current phase
        self.phase = "main"
        self.phase_counts: Dict[str, Dict[str, int]] = {}

    def charge(self, category: str, steps: int = 1) -> None:
        if steps < 0:
            raise ValueError(f"Cannot charge negative steps ({steps}) to {category}")
        if steps == 0:
            return
        self.counts[category] += steps
        phase = self.phase_counts.get(self.phase)
        if phase is None:
            phase = self.phase_counts[self.phase] = dict.fromkeys(CATEGORIES, 0)
        phase[category] += steps
        if category != "dma":
            self.clock.advance(steps)
        if category == "interp":
            for listener in self._interp_listeners:
                listener(steps)

    def on_interp(self, listener: Callable[[int], None]) -> None:
        self._interp_listeners.append(listener)

    def set_phase(self, phase: str) -> str:
        """Switch the attribution phase; returns the previous one."""
        previous, self.phase = self.phase, phase
        return previous

    def snapshot(self) -> Dict[str, int]:
        return dict(self.counts)

    def since(self, snapshot: Dict[str, int]) -> Dict[str, int]:
        return {c: self.counts[c] - snapshot.get(c, 0) for c in CATEGORIES}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def cpu_steps(self) -> int:
        return sum(self.counts[c] for c in CPU_CATEGORIES)


def cpu_total(counts: Dict[str, int]) -> int:
    return sum(counts.get(c, 0) for c in CPU_CATEGORIES)


@dataclass(frozen=True)
class CostModel:
    """Free parameters of the cost model, in steps."""

    context_switch: int = 200
    bookkeeping_copy: int = 300
    bus_access: int = 2
    import_glue: int = 24
    kernel_call: int = 1
    gpio_driver: int = 4
    spi_driver_word: int = 48
    osapi_buffer_copy: int = 2
    mmio_fault_path: int = 4
    prologue_entry: int = 12
    epilogue_dispatch: int = 16
    snapshot_copy: int = 1
    env_setup: int = 30
    dma_word: int = 1


def parse_costs(text: str, base: Optional[CostModel] = None) -> CostModel:
    """
    Parse `cost <name>=<u32>` override lines on top of `base`.
    Unknown names are a ConfigError, malformed lines a ParseError.
    """
    model = base if base is not None else CostModel()
    known = {f.name for f in dataclasses.fields(CostModel)}
    overrides: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] != "cost" or "=" not in parts[1]:
            raise ParseError(f"Expected 'cost <name>=<u32>', got '{line}'", lineno)
        name, value = parts[1].split("=", 1)
        if name not in known:
            raise ConfigError(f"Unknown cost parameter '{name}' (line {lineno})")
        try:
            number = int(value, 0)
        except ValueError:
            raise ParseError(f"Cost value '{value}' is not an integer", lineno)
        if number < 0 or number > 0xFFFFFFFF:
            raise ParseError(f"Cost value {number} is not a u32", lineno)
        overrides[name] = number
    return dataclasses.replace(model, **overrides)


def load_costs(path: Optional[str], base: Optional[CostModel] = None) -> CostModel:
    if not path:
        return base if base is not None else CostModel()
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Failed to read cost file '{path}': {str(e)}")
    return parse_costs(text, base)
