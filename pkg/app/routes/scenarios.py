"""
FastAPI router for running measurement scenarios on the bench platform.
"""

import logging
import os
from typing import Optional

from fastapi import APIRouter, Form, Request
from fastapi.responses import JSONResponse
from fastapi.templating import Jinja2Templates

from app.config import get_settings
from app.services.access import parse_mode, parse_trust
from app.services.errors import WasmIOError
from app.services.harness import (
    DEFAULT_DIVIDERS,
    SCENARIOS,
    bench_platform,
    report_frame,
    run_scenario,
    sweep_frame,
)
from app.services.ledger import load_costs

logger = logging.getLogger(__name__)

router = APIRouter()
templates = Jinja2Templates(directory=os.path.join(os.path.dirname(os.path.dirname(__file__)), "templates"))

# the web form runs short transfers; the CLI does full sweeps
WEB_SPI_WORDS = 32


@router.get("/health")
async def health():
    return {"status": "ok"}


@router.post("/run")
async def run_bench_scenario(
    request: Request,
    scenario: str = Form(...),
    mode: str = Form("mmio"),
    trust: str = Form("trusted"),
    dividers: Optional[str] = Form(None),
):
    """
    Run one scenario. JSON (metrics + ledger rows) for API clients,
    otherwise the rendered ledger table.
    """
    wants_json = "application/json" in request.headers.get("Accept", "")

    # -------------------------------------------------------------------------
    # STEP 1 — Validate form
    # -------------------------------------------------------------------------
    try:
        if scenario not in SCENARIOS:
            raise ValueError(f"Unknown scenario '{scenario}'")
        access_mode = parse_mode(mode)
        trust_mode = parse_trust(trust)
        sweep = [int(d, 0) for d in dividers.split(",") if d.strip()] if dividers else list(DEFAULT_DIVIDERS)
    except ValueError as e:
        return JSONResponse(status_code=400, content={"status": "error", "message": str(e)})

    # -------------------------------------------------------------------------
    # STEP 2 — Run
    # -------------------------------------------------------------------------
    try:
        desc = bench_platform()
        costs = load_costs(get_settings().costs_file, desc.cpu_model)
        result = run_scenario(scenario, desc, access_mode, trust_mode, costs, sweep, WEB_SPI_WORDS)
    except WasmIOError as e:
        logger.error(f"Scenario error: {str(e)}")
        return JSONResponse(status_code=422, content={"status": "error", "message": str(e)})

    ledger = report_frame([result])
    rows = ledger.to_dict(orient="records")
    sweep_rows = sweep_frame([result]).to_dict(orient="records") if result.rows and scenario == "spi-rate" else []

    logger.info(f"Scenario run: {scenario} | Mode: {mode} | Trust: {trust} | Rows: {len(rows)}")

    # -------------------------------------------------------------------------
    # STEP 3 — Adaptive response
    # -------------------------------------------------------------------------
    if wants_json:
        return {
            "status": "success",
            "scenario": scenario,
            "mode": access_mode.value,
            "trust": trust_mode.value,
            "metrics": result.metrics,
            "ledger": rows,
            "rows": result.rows,
        }

    return templates.TemplateResponse(
        request,
        "report.html",
        {
            "request": request,
            "scenario": scenario,
            "mode": access_mode.value,
            "trust": trust_mode.value,
            "metrics": result.metrics,
            "ledger": [r for r in rows if r["category"] != "metric"],
            "sweep": sweep_rows,
        },
    )
