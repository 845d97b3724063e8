"""Process settings (environment / .env) and flat key=value experiment files."""

from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import InvalidArgumentError
from app.models.experiment import ExperimentConfig

LIST_KEYS = {"beta_list", "lemma_etas"}


class Settings(BaseSettings):
    """Defaults shared by every run; override with RBGREEDY_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="RBGREEDY_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    workers: int = 1
    direct_solver_max_unknowns: int = 250_000
    cg_rtol: float = 1e-12
    breakdown_rtol: float = 1e-12
    validation_cache_mb: int = 512
    max_basis_size: int = 5000
    max_training_size: int = 5_000_000
    basis_path: Optional[Path] = None


@lru_cache()
def get_settings() -> Settings:
    return Settings()


def _normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_").lower()


def _parse_value(key: str, value: Any) -> Any:
    if key in LIST_KEYS and isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig from settings defaults, an optional key=value file and
    CLI overrides, in increasing order of precedence.

    Raises:
        InvalidArgumentError: unreadable file, unknown key or invalid value
    """
    settings = get_settings()
    raw: Dict[str, Any] = {
        "workers": settings.workers,
        "direct_max_unknowns": settings.direct_solver_max_unknowns,
        "cg_rtol": settings.cg_rtol,
    }
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise InvalidArgumentError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None or value == "":
                continue
            key = _normalize_key(key)
            raw[key] = _parse_value(key, value)
    for key, value in (overrides or {}).items():
        if value is None or (isinstance(value, (list, tuple)) and not value):
            continue
        key = _normalize_key(key)
        raw[key] = _parse_value(key, value)
    try:
        return ExperimentConfig(**raw)
    except ValidationError as e:
        raise InvalidArgumentError(f"invalid experiment config: {e}") from e
