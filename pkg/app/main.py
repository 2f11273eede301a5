import logging

from fastapi import FastAPI

from app.config import get_settings
from app.routes.check import router as check_router
from app.routes.scenarios import router as scenarios_router

logging.basicConfig(level=getattr(logging, get_settings().log_level, logging.INFO))

app = FastAPI(title="WASM I/O Simulator")

# Include routers
app.include_router(check_router)
app.include_router(scenarios_router)


@app.get("/", tags=["UI"])
async def read_root():
    """Entry point listing the available endpoints."""
    return {
        "service": "wasmio",
        "endpoints": ["POST /check", "POST /run", "GET /health"],
    }
