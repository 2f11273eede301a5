import os
from dataclasses import dataclass
from typing import Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


@dataclass(frozen=True)
class Settings:
    page_size: int
    max_frames: int
    max_copies: int
    max_registers: int
    dma_period: int
    costs_file: Optional[str]
    log_level: str
    spi_words: int


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw, 0)
    except ValueError:
        raise ValueError(f"Environment variable {name} must be an integer, got '{raw}'")


def get_settings() -> Settings:
    """
    Read the simulator settings from the environment.
    Values are re-read on every call so tests can monkeypatch the environment.
    """
    return Settings(
        page_size=_int_env("WASMIO_PAGE_SIZE", 4096),
        max_frames=_int_env("WASMIO_MAX_FRAMES", 1024),
        max_copies=_int_env("WASMIO_MAX_COPIES", 8),
        max_registers=_int_env("WASMIO_MAX_REGISTERS", 32),
        dma_period=_int_env("WASMIO_DMA_PERIOD", 1),
        costs_file=os.getenv("WASMIO_COSTS_FILE") or None,
        log_level=os.getenv("WASMIO_LOG_LEVEL", "INFO").upper(),
        spi_words=_int_env("WASMIO_SPI_WORDS", 512),
    )
