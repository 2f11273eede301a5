"""
Service loader: one simulated machine (clock, ledger, bus, devices,
interrupt controller, scheduler) and the load path that decodes, validates,
matches and instantiates services on it.
Pure Python module — no FastAPI imports.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from app.config import Settings, get_settings
from app.services.access import (
    AccessMode,
    ConveyorRegion,
    DmaController,
    ServicePort,
    TrustMode,
    build_linker,
    conveyor_size,
)
from app.services.devices import InterruptController, Peripheral, RegisterFile, make_device
from app.services.errors import Rejection, ScenarioError
from app.services.interrupts import Scheduler, TraceReport
from app.services.ledger import CostModel, SimClock, StepLedger
from app.services.manifest import PeripheralRequirements, extract_requirements
from app.services.platform import (
    PlatformDescription,
    ResolvedService,
    build_access_config,
    build_interrupt_config,
    match_requirements,
)
from app.services.wasm_binary import WasmModule, decode_module
from app.services.wasm_exec import (
    MASK32,
    MemoryConfig,
    ModuleInstance,
    instantiate,
    invoke,
    to_signed,
)
from app.services.wasm_validate import validate_module

logger = logging.getLogger(__name__)


@dataclass
class LoadedService:
    service_id: str
    mode: AccessMode
    trust: TrustMode
    module: WasmModule
    instance: ModuleInstance
    port: ServicePort
    resolved: ResolvedService
    dma: Optional[DmaController] = None


def relocate_dummies(module: WasmModule, mapping: Dict[int, int]) -> int:
    """Rewrite every `i32.const` equal to a mapped dummy address. Returns the number rewritten."""
    rewritten = 0
    for body in module.functions:
        for pc, ins in enumerate(body.code):
            if ins[0] == "i32.const" and (ins[1] & MASK32) in mapping:
                body.code[pc] = ("i32.const", to_signed(mapping[ins[1] & MASK32]))
                rewritten += 1
    return rewritten


def check_service(
    desc: PlatformDescription,
    wasm: bytes,
    service_id: str,
    max_registers: Optional[int] = None,
) -> Tuple[WasmModule, ResolvedService]:
    """decode -> validate -> extract -> match; raises Rejection when a dependency is missing."""
    settings = get_settings()
    module = decode_module(wasm)
    validate_module(module)
    req = extract_requirements(module) or PeripheralRequirements()
    cfg = build_access_config(desc, max_registers=max_registers or settings.max_registers)
    return module, match_requirements(req, cfg, desc, service_id)


class Machine:
    def __init__(
        self,
        desc: PlatformDescription,
        costs: Optional[CostModel] = None,
        settings: Optional[Settings] = None,
    ):
        self.desc = desc
        self.settings = settings or get_settings()
        self.costs = costs or desc.cpu_model
        self.clock = SimClock()
        self.ledger = StepLedger(self.clock)
        self.bus = RegisterFile(self.clock)
        self.controller = InterruptController()
        self.access_config = build_access_config(desc, max_registers=self.settings.max_registers)
        self.irq_config = build_interrupt_config(desc)
        self.scheduler = Scheduler(
            desc, self.irq_config, self.bus, self.controller, self.ledger,
            self.costs, self.settings.max_copies,
        )
        for dev in desc.devices:
            device = make_device(dev.label, dev.driver_kind, dev.base, dict(dev.instance_params), dev.irq_line)
            device.irq_sink = self.scheduler.device_irq
            self.bus.attach(device)
        self.services: Dict[str, LoadedService] = {}

    def device(self, label: str) -> Peripheral:
        return self.bus.device(label)

    def load_service(
        self,
        wasm: bytes,
        service_id: str,
        mode: AccessMode,
        trust: TrustMode = TrustMode.TRUSTED,
    ) -> LoadedService:
        if service_id in self.services:
            raise ScenarioError(f"Service '{service_id}' is already loaded")
        module = decode_module(wasm)
        validate_module(module)
        req = extract_requirements(module) or PeripheralRequirements()
        resolved = match_requirements(req, self.access_config, self.desc, service_id)

        port = ServicePort(resolved, mode, trust, self.bus, self.ledger, self.costs)
        declared_pages = module.memory_decl[0] if module.memory_decl else 0
        data_size = declared_pages * self.settings.page_size
        conveyor = None
        if mode.uses_dma:
            conveyor = ConveyorRegion.for_bindings(data_size, resolved.bindings, self.settings.dma_period)
            if mode is AccessMode.MMIO_DMA:
                mapping = {
                    dummy: conveyor.address_of(index)
                    for index, dummy in enumerate(resolved.dummy_table)
                    if dummy is not None
                }
                relocate_dummies(module, mapping)

        mem_cfg = MemoryConfig(
            page_size=self.settings.page_size,
            conveyor=conveyor_size(resolved.bindings) if mode.uses_dma else 0,
        )
        instance = instantiate(
            module, build_linker(port), mem_cfg, service_id, self.settings.max_frames, self.ledger
        )
        instance.io_hook = port.mmio_intercept
        port.instance = instance
        port.conveyor = conveyor

        self.scheduler.attach_service(service_id, instance, port)
        failed = []
        for sub in req.interrupts:
            status = self.scheduler.register_wasm_epilogue(
                service_id, sub.label, sub.priority, sub.handler_func_index, sub.copies
            )
            if status != 0:
                failed.append(("interrupt", sub.label, f"handler slot {sub.handler_func_index} rejected"))
        if failed:
            del self.scheduler.services[service_id]
            self.irq_config.subscriptions = [
                s for s in self.irq_config.subscriptions if s.service_id != service_id
            ]
            logger.warning(f"Service rejected: {service_id} | Subscriptions: {len(failed)} invalid")
            raise Rejection(service_id, failed)

        dma = None
        if conveyor is not None:
            dma = DmaController(self.bus, resolved.bindings, instance.memory, conveyor, self.ledger, self.costs)
            dma.attach()
            port.dma = dma

        loaded = LoadedService(service_id, mode, trust, module, instance, port, resolved, dma)
        self.services[service_id] = loaded
        logger.info(
            f"Service loaded: {service_id} | Mode: {mode.value} | Trust: {trust.value} | "
            f"Bindings: {len(resolved.bindings)}"
        )
        return loaded

    def invoke(self, service_id: str, func: str, args: Sequence[int] = ()) -> List[int]:
        """Run an export to completion outside the scheduler."""
        return invoke(self.services[service_id].instance, func, args, self.ledger)

    def set_register(self, label: str, value: int) -> None:
        reg = self.desc.register(label)
        if reg is None:
            raise ScenarioError(f"Unknown register label '{label}'")
        self.bus.poke(reg.phys_addr, value)

    def final_sync(self) -> None:
        for service in self.services.values():
            if service.dma is not None:
                service.dma.sync()

    def settle(self) -> None:
        """Let pending device activity (e.g. an SPI word on the wire) complete."""
        while True:
            target = self.bus.next_event()
            if target is None:
                return
            self.clock.advance_to(max(target, self.clock.now + 1))

    def run(self) -> TraceReport:
        report = self.scheduler.run_until_idle()
        self.final_sync()
        logger.info(
            f"Run complete | Steps: {self.clock.now} | Events: {len(report.events)} | "
            f"Interrupts: {len(self.scheduler.handled)}"
        )
        return report
