"""
Error types shared by the runtime, loader and harness.
Pure Python module — no FastAPI imports.
"""

from typing import List, Optional, Tuple


class WasmIOError(ValueError):
    """Base class for every error raised by the simulator."""


class DecodeError(WasmIOError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidateError(WasmIOError):
    def __init__(self, message: str, func_index: int, offset: int):
        super().__init__(f"function {func_index}, instruction {offset}: {message}")
        self.func_index = func_index
        self.offset = offset


class LinkError(WasmIOError):
    pass


class SpecError(WasmIOError):
    pass


class EncodeError(WasmIOError):
    pass


class AlreadyEmbedded(WasmIOError):
    pass


class RequirementsMissing(WasmIOError):
    pass


class ParseError(WasmIOError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(WasmIOError):
    pass


class Rejection(WasmIOError):
    """
    Load-time rejection of a service.
    `missing` holds (category, label, reason) for every unresolved dependency.
    """

    def __init__(self, service_id: str, missing: List[Tuple[str, str, str]]):
        labels = ", ".join(f"{cat}:{label} ({reason})" for cat, label, reason in missing)
        super().__init__(f"Service '{service_id}' rejected: {labels}")
        self.service_id = service_id
        self.missing = missing

    @property
    def labels(self) -> List[str]:
        return [label for _, label, _ in self.missing]


class ScenarioError(WasmIOError):
    pass


class IncompleteTransfer(WasmIOError):
    pass


class SimulationFault(WasmIOError):
    """Host-side bug: a bus access hit an address no device owns."""

    def __init__(self, message: str, addr: Optional[int] = None):
        super().__init__(message)
        self.addr = addr
