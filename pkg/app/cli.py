"""
Command line: run measurement scenarios, embed and check requirements
sections, and simulate scenario files.

Exit codes: 0 ok, 1 other failure, 2 service rejected, 3 scenario or
configuration error.
"""

import argparse
import logging
import sys
from typing import List, Optional

import pandas as pd

from app.config import get_settings
from app.services.access import parse_mode, parse_trust
from app.services.errors import (
    ConfigError,
    IncompleteTransfer,
    ParseError,
    Rejection,
    RequirementsMissing,
    ScenarioError,
    WasmIOError,
)
from app.services.harness import (
    BENCH_PLATFORM,
    DEFAULT_DIVIDERS,
    SCENARIOS,
    report_write,
    run_scenario,
    write_sweep,
)
from app.services.ledger import load_costs
from app.services.manifest import embed_requirements, extract_requirements, parse_manifest
from app.services.platform import parse_platform
from app.services.runtime import check_service
from app.services.scenario import load_scenario, run_scenario_file
from app.services.wasm_binary import decode_module

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_REJECTED = 2
EXIT_SCENARIO = 3


def _read_text(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read '{path}': {e}")


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read '{path}': {e}")


def _platform(path: Optional[str]):
    return parse_platform(_read_text(path) if path else BENCH_PLATFORM)


def _costs(args, desc):
    settings = get_settings()
    return load_costs(args.costs or settings.costs_file, desc.cpu_model)


def _csv_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    desc = _platform(args.platform)
    costs = _costs(args, desc)
    try:
        modes = [parse_mode(m) for m in _csv_list(args.mode)]
        trusts = [parse_trust(t) for t in _csv_list(args.trust)]
        dividers = [int(d, 0) for d in _csv_list(args.dividers)] if args.dividers else list(DEFAULT_DIVIDERS)
    except ValueError as e:
        raise ConfigError(str(e))
    words = args.words or get_settings().spi_words

    results = [
        run_scenario(args.scenario, desc, mode, trust, costs, dividers, words)
        for mode in modes
        for trust in trusts
    ]
    if args.scenario == "spi-rate":
        write_sweep(results, args.out)
    else:
        report_write(results, args.out)
    for result in results:
        summary = ", ".join(f"{k}={v}" for k, v in result.metrics.items())
        print(f"{result.scenario} {result.mode} {result.trust}: {summary}")
    return EXIT_OK


def cmd_embed(args) -> int:
    settings = get_settings()
    req = parse_manifest(_read_text(args.manifest), settings.max_copies)
    out = embed_requirements(_read_bytes(args.wasm), req, settings.max_copies)
    with open(args.out, "wb") as f:
        f.write(out)
    print(
        f"Embedded {len(req.registers)} registers, {len(req.devices)} devices, "
        f"{len(req.interrupts)} interrupts into {args.out}"
    )
    return EXIT_OK


def cmd_check(args) -> int:
    desc = _platform(args.platform)
    wasm = _read_bytes(args.wasm)
    if args.require_section and extract_requirements(decode_module(wasm)) is None:
        raise RequirementsMissing(f"'{args.wasm}' has no requirements section")
    _, resolved = check_service(desc, wasm, args.service_id)
    print(f"Service '{args.service_id}' resolved")
    for binding, dummy in zip(resolved.bindings, resolved.dummy_table):
        dummy_text = f"0x{dummy:08x}" if dummy is not None else "-"
        print(f"  {binding.label:<20} phys=0x{binding.phys_addr:08x} dummy={dummy_text} mask=0x{binding.mask:x}")
    for device in resolved.devices:
        print(f"  device {device.label} kind={device.driver_kind}")
    for label in sorted(resolved.interrupts):
        print(f"  interrupt {label}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    desc = _platform(args.platform)
    costs = _costs(args, desc)
    report = run_scenario_file(desc, load_scenario(args.scenario_file), costs)
    report.write_csv(args.out)
    if args.ledger:
        rows = [
            {"phase": phase, "category": category, "steps": steps}
            for phase, counts in sorted(report.phases.items())
            for category, steps in counts.items()
        ]
        pd.DataFrame(rows, columns=["phase", "category", "steps"]).to_csv(
            args.ledger, index=False, lineterminator="\n"
        )
    print(f"Simulated {len(report.events)} trace events up to step {report.final_step}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wasmio", description="WASM peripheral I/O runtime simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a measurement scenario and write a CSV report")
    run.add_argument("--platform", help="Platform description (defaults to the bench board)")
    run.add_argument("--scenario", required=True, choices=SCENARIOS)
    run.add_argument("--mode", default="mmio", help="Access mode, or a comma separated list")
    run.add_argument("--trust", default="trusted", help="trusted, untrusted, or both comma separated")
    run.add_argument("--dividers", help="Comma separated SPI dividers")
    run.add_argument("--words", type=int, help="Words per SPI transfer")
    run.add_argument("--costs", help="Cost model override file")
    run.add_argument("--out", required=True)
    run.set_defaults(handler=cmd_run)

    embed = sub.add_parser("embed", help="Append a requirements section to a module")
    embed.add_argument("--wasm", required=True)
    embed.add_argument("--manifest", required=True)
    embed.add_argument("--out", required=True)
    embed.set_defaults(handler=cmd_embed)

    check = sub.add_parser("check", help="Resolve a service against a platform")
    check.add_argument("--platform")
    check.add_argument("--wasm", required=True)
    check.add_argument("--service-id", required=True)
    check.add_argument("--require-section", action="store_true",
                       help="Fail when the module carries no requirements section")
    check.set_defaults(handler=cmd_check)

    simulate = sub.add_parser("simulate", help="Run a scenario file and write its trace")
    simulate.add_argument("--platform")
    simulate.add_argument("--scenario-file", required=True)
    simulate.add_argument("--costs")
    simulate.add_argument("--out", required=True)
    simulate.add_argument("--ledger", help="Also write the per-phase ledger CSV")
    simulate.set_defaults(handler=cmd_simulate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO))
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Rejection as e:
        for category, label, reason in e.missing:
            print(f"missing {category} '{label}': {reason}", file=sys.stderr)
        logger.warning(f"Service rejected: {e.service_id} | Missing: {len(e.missing)}")
        return EXIT_REJECTED
    except (ScenarioError, IncompleteTransfer, ParseError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCENARIO
    except WasmIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
