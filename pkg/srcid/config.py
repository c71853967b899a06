# srcid/config.py
from __future__ import annotations
import os
from pathlib import Path
from typing import Optional
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

try:
    from dotenv import load_dotenv
except Exception:  # pragma: no cover
    load_dotenv = None


# ── 1) find .env ──────────────────────────────────────────────────────────────
def _find_env_file() -> Optional[str]:
    # current working directory first
    cwd = Path.cwd() / ".env"
    if cwd.exists():
        return str(cwd)
    # then next to the package (up to 3 levels)
    here = Path(__file__).resolve()
    for up in (1, 2, 3):
        p = here.parents[up] / ".env"
        if p.exists():
            return str(p)
    # explicit path through the environment
    x = os.getenv("SRCID_ENV_FILE")
    return x if x and Path(x).exists() else None


ENV_FILE = _find_env_file()

# ── 2) load .env into os.environ (no override: real env wins) ────────────────
if ENV_FILE and load_dotenv:
    load_dotenv(ENV_FILE, override=False)


# ── 3) settings model ─────────────────────────────────────────────────────────
class Settings(BaseSettings):
    env: str = Field("dev")
    log_dir: Path = Field(Path(__file__).resolve().parents[1] / "logs")
    log_level: str = Field("INFO")
    output_dir: Path = Field(Path("out"))

    # level-parallel workers for scenario sweeps
    jobs: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    # numerical defaults; experiment files may override the CG ones
    solver_rtol: float = Field(1e-10, gt=0)
    tau_a: float = Field(1e-10, ge=0)
    tau_r: float = Field(1e-6, ge=0)
    k_max: int = Field(500, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="SRCID_",
        extra="ignore",
        case_sensitive=False,
    )


settings = Settings(_env_file=ENV_FILE)
