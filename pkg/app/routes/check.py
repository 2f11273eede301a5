"""
FastAPI router for load-time service checks.
Accepts a platform description and a service module, resolves the service
and reports its bindings or every missing dependency.
"""

import time
import logging
from fastapi import APIRouter, File, Form, HTTPException, Request, UploadFile
from fastapi.responses import JSONResponse

from app.services.errors import Rejection, WasmIOError
from app.services.platform import parse_platform
from app.services.runtime import check_service

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

router = APIRouter()

MAX_MODULE_SIZE = 4 * 1024 * 1024  # 4 MB
MAX_PLATFORM_SIZE = 256 * 1024


@router.post("/check")
async def check_upload(
    request: Request,
    platform: UploadFile = File(...),
    service: UploadFile = File(...),
    service_id: str = Form(...),
):
    """
    Run decode -> validate -> extract -> match for an uploaded module.
    """
    start_time = time.perf_counter()

    # helper for adaptive error handling
    def _error_response(status_code: int, detail: str):
        if "application/json" in request.headers.get("Accept", ""):
            return JSONResponse(status_code=status_code, content={"status": "error", "message": detail})
        raise HTTPException(status_code=status_code, detail=detail)

    try:
        # ---------------------------------------------------------------------
        # STEP 1 — Validate uploads
        # ---------------------------------------------------------------------
        if not service.filename or not service.filename.lower().endswith(".wasm"):
            return _error_response(400, "Invalid file type. Please upload a .wasm module.")

        wasm = await service.read()
        if len(wasm) > MAX_MODULE_SIZE:
            return _error_response(413, "Module too large. Maximum allowed size is 4MB.")

        platform_raw = await platform.read()
        if len(platform_raw) > MAX_PLATFORM_SIZE:
            return _error_response(413, "Platform description too large.")
        try:
            platform_text = platform_raw.decode("utf-8")
        except UnicodeDecodeError:
            return _error_response(400, "Platform description must be UTF-8 text.")

        # ---------------------------------------------------------------------
        # STEP 2 — Resolve
        # ---------------------------------------------------------------------
        desc = parse_platform(platform_text)
        _, resolved = check_service(desc, wasm, service_id)
        duration = time.perf_counter() - start_time

        logger.info(
            f"Check successful: {service.filename} | "
            f"Service: {service_id} | "
            f"Size: {len(wasm) / 1024:.2f} KB | "
            f"Bindings: {len(resolved.bindings)} | "
            f"Time: {duration:.4f}s"
        )

        return {
            "status": "resolved",
            "service_id": service_id,
            "bindings": [
                {
                    "label": b.label,
                    "phys_addr": f"0x{b.phys_addr:08x}",
                    "width": b.width,
                    "mask": f"0x{b.mask:x}",
                    "dummy": f"0x{d:08x}" if d is not None else None,
                }
                for b, d in zip(resolved.bindings, resolved.dummy_table)
            ],
            "devices": [d.label for d in resolved.devices],
            "interrupts": sorted(resolved.interrupts),
        }

    except Rejection as r:
        logger.warning(f"Service rejected: {r.service_id} | Missing: {len(r.missing)}")
        return JSONResponse(
            status_code=422,
            content={
                "status": "rejected",
                "service_id": r.service_id,
                "missing": [
                    {"category": c, "label": label, "reason": reason} for c, label, reason in r.missing
                ],
            },
        )

    except WasmIOError as e:
        logger.warning(f"Check failed: {str(e)}")
        return _error_response(400, str(e))

    except HTTPException as he:
        if "application/json" in request.headers.get("Accept", ""):
            return JSONResponse(status_code=he.status_code, content={"status": "error", "message": he.detail})
        raise he
