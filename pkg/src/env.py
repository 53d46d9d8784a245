"""Environment configuration.

Behavior:
- Loads `.env` from the repository root (parent of `src/`) via python-dotenv.
- Does NOT override existing environment variables.
- Exposes the few knobs the CLI reads as a frozen `Settings` object:
  `LINQ_WORKERS`, `LINQ_LOG_LEVEL`, `LINQ_OUT`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _repo_root() -> Path:
    # This file lives in `src/`, so repo root is one level up.
    return Path(__file__).resolve().parents[1]


def load_env(path: str | os.PathLike | None = None, *, override: bool = False) -> bool:
    """Load `.env` (repo root by default). Returns True if a file was read."""
    env_path = Path(path) if path is not None else (_repo_root() / ".env")
    if not env_path.is_file():
        return False
    return load_dotenv(env_path, override=override)


@dataclass(frozen=True)
class Settings:
    workers: int = 1
    log_level: str = "INFO"
    out_dir: Path = Path("out")

    @classmethod
    def from_env(cls) -> "Settings":
        raw_workers = os.getenv("LINQ_WORKERS", "1")
        try:
            workers = int(raw_workers)
        except ValueError as e:
            raise ValueError(f"LINQ_WORKERS must be an integer, got {raw_workers!r}") from e
        if workers < 1:
            raise ValueError(f"LINQ_WORKERS must be >= 1, got {workers}")

        log_level = os.getenv("LINQ_LOG_LEVEL", "INFO").upper()
        if log_level not in LOG_LEVELS:
            raise ValueError(f"LINQ_LOG_LEVEL must be one of {LOG_LEVELS}, got {log_level!r}")

        return cls(workers=workers, log_level=log_level, out_dir=Path(os.getenv("LINQ_OUT", "out")))


def get_settings(*, load_file: bool = True) -> Settings:
    if load_file:
        load_env()
    return Settings.from_env()
