import os
import sys

# Add app directory to path
sys.path.append(os.getcwd())

from app.services.access import AccessMode
from app.services.programs import (
    ServiceProgram,
    irq_latency_program,
    spi_transfer_program,
)
from app.services.wasm_binary import emit_module

BUILD_DIR = os.path.join("samples", "build")


def toggle_bare() -> bytes:
    """MMIO toggle service without a requirements section, for `wasmio embed`."""
    program = ServiceProgram(AccessMode.MMIO, ["gpio0_odr"], ["gpio0"])
    program.add_function(
        "toggle",
        program.gpio_set("gpio0", "gpio0_odr", 3, 1) + program.gpio_set("gpio0", "gpio0_odr", 3, 0),
    )
    return emit_module(program.module_spec())


def write(name: str, data: bytes) -> None:
    path = os.path.join(BUILD_DIR, name)
    with open(path, "wb") as f:
        f.write(data)
    print(f"Wrote {path} ({len(data)} bytes)")


if __name__ == "__main__":
    os.makedirs(BUILD_DIR, exist_ok=True)
    write("sensor.wasm", irq_latency_program(AccessMode.MMIO))
    write("radio.wasm", spi_transfer_program(AccessMode.RAPI, 16))
    write("toggle_bare.wasm", toggle_bare())
