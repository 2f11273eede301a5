import sys
import os
import io
import tempfile
from contextlib import redirect_stderr, redirect_stdout

import pandas as pd

# Add the parent directory to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.cli import EXIT_FAILURE, EXIT_OK, EXIT_REJECTED, EXIT_SCENARIO, main
from app.services.access import AccessMode
from app.services.harness import REPORT_COLUMNS, SWEEP_COLUMNS
from app.services.manifest import extract_requirements
from app.services.programs import ServiceProgram, irq_latency_program, spi_transfer_program
from app.services.wasm_binary import decode_module, emit_module

SAMPLES = os.path.join(os.path.dirname(__file__), "..", "samples")
PLATFORM = os.path.join(SAMPLES, "bench.platform")


def _run(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def _bare_toggle() -> bytes:
    program = ServiceProgram(AccessMode.MMIO, ["gpio0_odr"], ["gpio0"])
    program.add_function("toggle", program.gpio_set("gpio0", "gpio0_odr", 3, 1))
    return emit_module(program.module_spec())


def test_run_report():
    print("Testing 'run' subcommand...")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "roundtrip.csv")
        code, out, _ = _run(["run", "--scenario", "gpio-roundtrip", "--mode", "mmio,rapi",
                             "--trust", "trusted,untrusted", "--out", path])
        assert code == EXIT_OK
        assert out.count("gpio-roundtrip") == 4
        frame = pd.read_csv(path)
        assert list(frame.columns) == REPORT_COLUMNS
        assert set(frame["trust"]) == {"trusted", "untrusted"}

        sweep = os.path.join(tmp, "sweep.csv")
        code, _, _ = _run(["run", "--scenario", "spi-rate", "--mode", "osapi", "--dividers", "2,8",
                           "--words", "8", "--out", sweep])
        assert code == EXIT_OK
        frame = pd.read_csv(sweep)
        assert list(frame.columns) == SWEEP_COLUMNS
        assert list(frame["divider"]) == [2, 8]
    print("✓ 'run' subcommand passed")


def test_run_errors():
    print("Testing 'run' errors...")
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "x.csv")
        code, _, err = _run(["run", "--scenario", "gpio-roundtrip", "--mode", "telepathy", "--out", out])
        assert code == EXIT_SCENARIO
        assert "telepathy" in err
        code, _, _ = _run(["run", "--scenario", "gpio-roundtrip", "--platform", os.path.join(tmp, "none"), "--out", out])
        assert code == EXIT_SCENARIO
        code, _, _ = _run(["run", "--scenario", "gpio-roundtrip", "--out", os.path.join(tmp, "no", "dir.csv")])
        assert code == EXIT_FAILURE
    print("✓ 'run' errors passed")


def test_embed_and_check():
    print("Testing 'embed' and 'check' subcommands...")
    with tempfile.TemporaryDirectory() as tmp:
        bare = os.path.join(tmp, "toggle_bare.wasm")
        with open(bare, "wb") as f:
            f.write(_bare_toggle())
        embedded = os.path.join(tmp, "toggle.wasm")

        code, out, _ = _run(["embed", "--wasm", bare, "--manifest", os.path.join(SAMPLES, "toggle.manifest"),
                             "--out", embedded])
        assert code == EXIT_OK
        with open(embedded, "rb") as f:
            data = f.read()
        assert data.startswith(_bare_toggle())
        req = extract_requirements(decode_module(data))
        assert [r.label for r in req.registers] == ["gpio0_odr"]

        # a second embed is refused
        code, _, err = _run(["embed", "--wasm", embedded, "--manifest", os.path.join(SAMPLES, "toggle.manifest"),
                             "--out", os.path.join(tmp, "twice.wasm")])
        assert code == EXIT_FAILURE
        assert "already" in err

        code, out, _ = _run(["check", "--platform", PLATFORM, "--wasm", embedded, "--service-id", "sensor"])
        assert code == EXIT_OK
        assert "dummy=0x80000000" in out

        code, _, err = _run(["check", "--platform", PLATFORM, "--wasm", embedded, "--service-id", "radio"])
        assert code == EXIT_REJECTED
        assert "missing register 'gpio0_odr'" in err
        assert "missing device 'gpio0'" in err

        # no section: empty requirements unless the section is demanded
        code, _, _ = _run(["check", "--platform", PLATFORM, "--wasm", bare, "--service-id", "radio"])
        assert code == EXIT_OK
        code, _, err = _run(["check", "--platform", PLATFORM, "--wasm", bare, "--service-id", "radio",
                             "--require-section"])
        assert code == EXIT_FAILURE
        assert "no requirements section" in err

        garbage = os.path.join(tmp, "garbage.wasm")
        with open(garbage, "wb") as f:
            f.write(b"\x00asm\x01\x00")
        code, _, _ = _run(["check", "--wasm", garbage, "--service-id", "bench"])
        assert code == EXIT_FAILURE
    print("✓ 'embed' and 'check' subcommands passed")


def test_simulate():
    print("Testing 'simulate' subcommand...")
    with tempfile.TemporaryDirectory() as tmp:
        os.makedirs(os.path.join(tmp, "build"))
        with open(os.path.join(tmp, "build", "sensor.wasm"), "wb") as f:
            f.write(irq_latency_program(AccessMode.MMIO))
        with open(os.path.join(tmp, "build", "radio.wasm"), "wb") as f:
            f.write(spi_transfer_program(AccessMode.RAPI, 16))
        with open(os.path.join(SAMPLES, "two_services.scenario"), "r", encoding="utf-8") as f:
            text = f.read()
        scenario = os.path.join(tmp, "two.scenario")
        with open(scenario, "w", encoding="utf-8") as f:
            f.write(text)

        trace = os.path.join(tmp, "trace.csv")
        ledger = os.path.join(tmp, "ledger.csv")
        code, out, _ = _run(["simulate", "--platform", PLATFORM, "--scenario-file", scenario,
                             "--out", trace, "--ledger", ledger])
        assert code == EXIT_OK
        assert "trace events" in out
        frame = pd.read_csv(trace)
        assert list(frame.columns) == ["step", "level", "service", "event", "detail"]
        assert (frame["event"] == "raise").sum() == 2
        phases = pd.read_csv(ledger)
        assert {"prologue", "wasm_epilogue", "mainline"} <= set(phases["phase"])

        broken = os.path.join(tmp, "broken.scenario")
        with open(broken, "w", encoding="utf-8") as f:
            f.write("service radio wasm=build/radio.wasm mode=rapi\nat 10 raise nowhere\n")
        code, _, err = _run(["simulate", "--platform", PLATFORM, "--scenario-file", broken, "--out", trace])
        assert code == EXIT_SCENARIO
        assert "nowhere" in err
    print("✓ 'simulate' subcommand passed")


if __name__ == "__main__":
    try:
        test_run_report()
        test_run_errors()
        test_embed_and_check()
        test_simulate()
        print("\nAll CLI tests passed successfully!")
    except Exception as e:
        print(f"\nTests failed: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
