"""
Four-level interrupt model: E1 (system prologues) > EHalf (firmware and
system epilogues) > EQuarter (WASM epilogues) > E0 (service mainlines).

The highest non-empty level always runs. Lower levels are preempted at
instruction boundaries and every level runs its flows to completion in
queue order. Host routines (prologue, system epilogue, firmware epilogue)
are atomic units.
Pure Python module — no FastAPI imports.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Deque, Dict, List, Optional, Tuple

import pandas as pd

from app.services.access import ServicePort, masked_read
from app.services.devices import InterruptController, RegisterFile
from app.services.errors import ScenarioError
from app.services.ledger import CostModel, StepLedger
from app.services.manifest import DEFAULT_MAX_COPIES, CopyDescriptor
from app.services.platform import (
    InterruptConfig,
    PlatformDescription,
    RegisterBinding,
    ServiceAccess,
    Subscription,
    copy_problem,
)
from app.services.wasm_exec import ExecutionEnvironment, ModuleInstance, Trap

logger = logging.getLogger(__name__)

DEFAULT_STEP_LIMIT = 200_000_000


class PriorityLevel(IntEnum):
    E0 = 0
    EQUARTER = 1
    EHALF = 2
    E1 = 3

    @property
    def title(self) -> str:
        return {0: "E0", 1: "EQuarter", 2: "EHalf", 3: "E1"}[int(self)]


TRACE_COLUMNS = ["step", "level", "service", "event", "detail"]


@dataclass(frozen=True)
class TraceEvent:
    step: int
    level: PriorityLevel
    service: str
    event: str  # raise | start | suspend | resume | end | trap | drop
    detail: str
    flow: int


@dataclass
class PendingInterrupt:
    line: int
    asserting_label: str
    arrival_step: int
    # (binding, value) read at prologue time; one entry per physical register
    buffered_data: List[Tuple[RegisterBinding, int]] = field(default_factory=list)
    ident: int = 0

    def buffered(self, phys_addr: int) -> Optional[int]:
        for binding, value in self.buffered_data:
            if binding.phys_addr == phys_addr:
                return value
        return None


@dataclass
class WasmEpilogueEntry:
    service_id: str
    handler_func_index: int
    priority: int
    seq: int
    snapshot: List[Tuple[CopyDescriptor, int]] = field(default_factory=list)
    # interrupt this entry was spawned for
    pending: int = 0


@dataclass
class _Flow:
    ident: int
    level: PriorityLevel
    service: str
    detail: str
    env: Optional[ExecutionEnvironment] = None
    entry: Optional[WasmEpilogueEntry] = None
    suspended: bool = False


@dataclass
class _TimedAction:
    at_step: int
    seq: int
    description: str
    action: Callable[[], None]


@dataclass
class TraceReport:
    events: List[TraceEvent]
    ledger: Dict[str, int]
    phases: Dict[str, Dict[str, int]]
    final_step: int

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "step": e.step,
                "level": e.level.title,
                "service": e.service,
                "event": e.event,
                "detail": e.detail,
            }
            for e in self.events
        ]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    def flows(self) -> Dict[int, List[TraceEvent]]:
        grouped: Dict[int, List[TraceEvent]] = {}
        for event in self.events:
            grouped.setdefault(event.flow, []).append(event)
        return grouped

    def handler_runs(self, service_id: str) -> List[TraceEvent]:
        return [
            e for e in self.events
            if e.level == PriorityLevel.EQUARTER and e.service == service_id and e.event == "start"
        ]


class Scheduler:
    def __init__(
        self,
        desc: PlatformDescription,
        config: InterruptConfig,
        bus: RegisterFile,
        controller: InterruptController,
        ledger: StepLedger,
        costs: Optional[CostModel] = None,
        max_copies: int = DEFAULT_MAX_COPIES,
        step_limit: int = DEFAULT_STEP_LIMIT,
    ):
        self.desc = desc
        self.config = config
        self.bus = bus
        self.controller = controller
        self.ledger = ledger
        self.clock = ledger.clock
        self.costs = costs or CostModel()
        self.max_copies = max_copies
        self.step_limit = step_limit

        self.services: Dict[str, Tuple[ModuleInstance, ServicePort]] = {}
        self.trace: List[TraceEvent] = []
        self.handled: List[PendingInterrupt] = []

        self._prologues: Deque[Tuple[PendingInterrupt, _Flow]] = deque()
        self._ehalf: Deque[Tuple[_Flow, Callable[[], None]]] = deque()
        self._equarter: Deque[List[WasmEpilogueEntry]] = deque()
        self._mainlines: Deque[_Flow] = deque()
        self._active: Dict[PriorityLevel, _Flow] = {}
        self._timed: List[_TimedAction] = []
        self._flow_seq = 0
        self._pending_seq = 0
        self._timed_seq = 0

    # -- setup ---------------------------------------------------------------

    def attach_service(self, service_id: str, instance: ModuleInstance, port: ServicePort) -> None:
        self.services[service_id] = (instance, port)
        port.irq_registrar = self.register_wasm_epilogue

    def _new_flow(self, level: PriorityLevel, service: str, detail: str) -> _Flow:
        self._flow_seq += 1
        return _Flow(self._flow_seq, level, service, detail)

    def _emit(self, flow: _Flow, event: str, detail: str = "") -> None:
        self.trace.append(TraceEvent(self.clock.now, flow.level, flow.service, event, detail or flow.detail, flow.ident))

    def add_mainline(self, service_id: str, func: str, args: Tuple[int, ...] = ()) -> None:
        if service_id not in self.services:
            raise ScenarioError(f"Mainline for unknown service '{service_id}'")
        instance, _ = self.services[service_id]
        try:
            func_index = instance.export_index(func)
        except ValueError as e:
            raise ScenarioError(str(e))
        flow = self._new_flow(PriorityLevel.E0, service_id, func)
        flow.env = ExecutionEnvironment(instance, self.ledger)
        flow.env.start(func_index, args)
        self._mainlines.append(flow)

    def schedule(self, at_step: int, description: str, action: Callable[[], None]) -> None:
        """Run a host action (register mutation, pin change) at the first boundary >= at_step."""
        self._timed.append(_TimedAction(at_step, self._timed_seq, description, action))
        self._timed_seq += 1
        self._timed.sort(key=lambda t: (t.at_step, t.seq))

    def raise_line(self, line: int, asserting_label: str, at_step: int) -> None:
        irq = self.config.exposed.get(asserting_label)
        if irq is None:
            raise ScenarioError(f"Interrupt label '{asserting_label}' is not exposed by the platform")
        if irq.line != line:
            raise ScenarioError(f"Interrupt '{asserting_label}' is on line {irq.line}, not {line}")
        self.controller.raise_line(line, asserting_label, at_step)

    def raise_label(self, label: str, at_step: int) -> None:
        irq = self.config.exposed.get(label)
        if irq is None:
            raise ScenarioError(f"Interrupt label '{label}' is not exposed by the platform")
        self.controller.raise_line(irq.line, label, at_step)

    def device_irq(self, line: int, device_label: str, at_step: int) -> None:
        """Line asserted by a simulated device; every exposed label on the line asserts."""
        labels = self.config.labels_on_line(line)
        if not labels:
            logger.debug(f"Unexposed interrupt line {line} from {device_label} ignored")
            return
        for label in labels:
            self.controller.raise_line(line, label, at_step)

    # -- registration --------------------------------------------------------

    def register_wasm_epilogue(
        self,
        service_id: str,
        label: str,
        priority: int,
        func_index: int,
        copies: Tuple[CopyDescriptor, ...] = (),
    ) -> int:
        """Subscribe a table slot as WASM epilogue for `label`. Returns 0 or -1."""
        if service_id not in self.services:
            return -1
        instance, port = self.services[service_id]
        if label not in port.resolved.interrupts or label not in self.config.exposed:
            return -1
        if not 0 <= priority <= 0xFF:
            return -1
        if not 0 <= func_index < len(instance.table) or instance.table[func_index] is None:
            return -1
        ftype = instance.module.func_type(instance.table[func_index])
        if ftype.params or ftype.results:
            return -1
        if len(copies) > self.max_copies:
            return -1
        access = _access_of(port)
        if any(copy_problem(copy, access) for copy in copies):
            return -1
        self.config.subscribe(Subscription(service_id, label, priority, func_index, tuple(copies)))
        logger.debug(f"Epilogue registered | Service: {service_id} | Label: {label} | Priority: {priority}")
        return 0

    # -- host routines -------------------------------------------------------

    def system_prologue(self, pending: PendingInterrupt) -> None:
        """Buffer every authorized copy source, run the clear action and queue EHalf work."""
        self.ledger.charge("irq", self.costs.prologue_entry)
        for sub in self.config.subscribers(pending.asserting_label):
            if sub.service_id not in self.services:
                continue
            access = _access_of(self.services[sub.service_id][1])
            for copy in sub.copies:
                if copy_problem(copy, access):
                    continue
                binding = access.bindings[access.binding_index(copy.source_register_label)]
                if pending.buffered(binding.phys_addr) is not None:
                    continue
                self.ledger.charge("driver", self.costs.bus_access)
                pending.buffered_data.append((binding, masked_read(self.bus, binding)))

        irq = self.config.exposed[pending.asserting_label]
        if irq.clear_action is not None:
            reg = self.desc.register(irq.clear_action[0])
            self.ledger.charge("driver", self.costs.bus_access)
            self.bus.bus_write(reg.phys_addr, reg.width, irq.clear_action[1])

        for firmware in self.config.firmware.get(pending.asserting_label, []):
            flow = self._new_flow(PriorityLevel.EHALF, "firmware", f"{firmware.label} cost={firmware.cost}")
            self._ehalf.append((flow, lambda cost=firmware.cost: self.ledger.charge("irq", cost)))
        flow = self._new_flow(PriorityLevel.EHALF, "system", f"epilogue {pending.asserting_label}")
        self._ehalf.append((flow, lambda: self.system_epilogue(pending)))

    def system_epilogue(self, pending: PendingInterrupt) -> None:
        """Create the WASM epilogue entries of every subscriber, in (priority, registration) order."""
        self.handled.append(pending)
        batch: List[WasmEpilogueEntry] = []
        for sub in self.config.subscribers(pending.asserting_label):
            if sub.service_id not in self.services:
                continue
            port = self.services[sub.service_id][1]
            access = _access_of(port)
            self.ledger.charge("irq", self.costs.epilogue_dispatch)
            snapshot = []
            for copy in sub.copies:
                if copy_problem(copy, access):
                    continue
                binding = access.bindings[access.binding_index(copy.source_register_label)]
                value = pending.buffered(binding.phys_addr)
                if value is None:
                    continue
                self.ledger.charge("irq", self.costs.snapshot_copy)
                snapshot.append((copy, value))
            batch.append(WasmEpilogueEntry(
                sub.service_id, sub.table_index, sub.priority, sub.seq, snapshot, pending.ident
            ))
        if not batch:
            flow = self._active.get(PriorityLevel.EHALF)
            if flow is not None:
                self._emit(flow, "drop", f"{pending.asserting_label} has no subscribers")
            return
        self._equarter.append(batch)

    # -- level machine -------------------------------------------------------

    def _collect(self) -> None:
        while self._timed and self._timed[0].at_step <= self.clock.now:
            self._timed.pop(0).action()
        for raised in self.controller.due(self.clock.now):
            self._pending_seq += 1
            pending = PendingInterrupt(raised.line, raised.label, raised.at_step, ident=self._pending_seq)
            flow = self._new_flow(PriorityLevel.E1, "system", f"prologue {raised.label}")
            self._emit(flow, "raise", f"{raised.label} line={raised.line} arrival={raised.at_step}")
            self._prologues.append((pending, flow))

    def _ready(self) -> Optional[PriorityLevel]:
        if self._prologues:
            return PriorityLevel.E1
        if self._ehalf:
            return PriorityLevel.EHALF
        if PriorityLevel.EQUARTER in self._active or self._equarter:
            return PriorityLevel.EQUARTER
        if PriorityLevel.E0 in self._active or self._mainlines:
            return PriorityLevel.E0
        return None

    def _wakeup(self) -> Optional[int]:
        candidates = [
            s for s in (
                self.controller.next_step(),
                self.bus.next_event(),
                self._timed[0].at_step if self._timed else None,
            )
            if s is not None
        ]
        return min(candidates) if candidates else None

    def run_until_idle(self) -> TraceReport:
        while True:
            self._collect()
            level = self._ready()
            if level is None:
                target = self._wakeup()
                if target is None:
                    break
                # idle: time passes without charging the ledger
                self.clock.advance_to(max(target, self.clock.now + 1))
                continue
            if self.clock.now > self.step_limit:
                raise ScenarioError(f"Scenario exceeded {self.step_limit} steps")
            for lower, flow in self._active.items():
                if lower < level and not flow.suspended:
                    flow.suspended = True
                    self._emit(flow, "suspend")
            self._run_unit(level)
        self.ledger.set_phase("main")
        return self.report()

    def report(self) -> TraceReport:
        return TraceReport(
            list(self.trace),
            self.ledger.snapshot(),
            {k: dict(v) for k, v in self.ledger.phase_counts.items()},
            self.clock.now,
        )

    def _run_unit(self, level: PriorityLevel) -> None:
        if level == PriorityLevel.E1:
            pending, flow = self._prologues.popleft()
            self._run_host(flow, "prologue", lambda: self.system_prologue(pending))
        elif level == PriorityLevel.EHALF:
            flow, job = self._ehalf.popleft()
            phase = "firmware_epilogue" if flow.service == "firmware" else "system_epilogue"
            self._run_host(flow, phase, job)
        elif level == PriorityLevel.EQUARTER:
            self._step_epilogue()
        else:
            self._step_mainline()

    def _run_host(self, flow: _Flow, phase: str, job: Callable[[], None]) -> None:
        self._active[flow.level] = flow
        self.ledger.set_phase(phase)
        self._emit(flow, "start")
        job()
        self._emit(flow, "end")
        del self._active[flow.level]

    def _resume(self, flow: _Flow) -> None:
        if flow.suspended:
            flow.suspended = False
            self._emit(flow, "resume")

    def _step_mainline(self) -> None:
        flow = self._active.get(PriorityLevel.E0)
        if flow is None:
            flow = self._mainlines.popleft()
            self._active[PriorityLevel.E0] = flow
            self.ledger.set_phase("mainline")
            self._emit(flow, "start")
        self._resume(flow)
        self.ledger.set_phase("mainline")
        try:
            running = flow.env.step()
        except Trap as trap:
            logger.warning(f"Mainline trapped | Service: {flow.service} | {trap}")
            self._emit(flow, "trap", trap.kind.name)
            del self._active[PriorityLevel.E0]
            return
        if not running:
            self._emit(flow, "end")
            del self._active[PriorityLevel.E0]

    def _start_epilogue(self) -> _Flow:
        batch = self._equarter[0]
        entry = batch.pop(0)
        if not batch:
            self._equarter.popleft()
        instance, port = self.services[entry.service_id]
        flow = self._new_flow(PriorityLevel.EQUARTER, entry.service_id, f"handler slot={entry.handler_func_index}")
        flow.entry = entry
        self._active[PriorityLevel.EQUARTER] = flow
        self.ledger.set_phase("wasm_epilogue")
        self._emit(flow, "start")

        port.enter()
        # fresh execution environment per epilogue
        self.ledger.charge("interp", self.costs.env_setup)
        port.deliver_copies(entry.snapshot)
        flow.env = ExecutionEnvironment(instance, self.ledger)
        flow.env.start(instance.table[entry.handler_func_index], ())
        return flow

    def _finish_epilogue(self, flow: _Flow) -> None:
        port = self.services[flow.service][1]
        port.end_epilogue()
        port.exit()
        del self._active[PriorityLevel.EQUARTER]

    def _step_epilogue(self) -> None:
        flow = self._active.get(PriorityLevel.EQUARTER)
        if flow is None:
            self._start_epilogue()
            # preemption is checked again before the first handler instruction
            return
        self._resume(flow)
        self.ledger.set_phase("wasm_epilogue")
        try:
            running = flow.env.step()
        except Trap as trap:
            logger.warning(f"Epilogue trapped | Service: {flow.service} | {trap}")
            self._emit(flow, "trap", trap.kind.name)
            self._finish_epilogue(flow)
            return
        if not running:
            self._emit(flow, "end")
            self._finish_epilogue(flow)


def _access_of(port: ServicePort) -> ServiceAccess:
    return ServiceAccess(
        port.service_id,
        port.resolved.bindings,
        port.resolved.devices,
        port.resolved.interrupts,
    )
