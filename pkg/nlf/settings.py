from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .types import PRESETS, ExperimentConfig


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    app_env: str = Field(default="dev", alias="NLF_ENV")
    log_level: str = Field(default="INFO", alias="NLF_LOG_LEVEL")

    # Overrides the seed of any experiment config when set.
    seed: int | None = Field(default=None, alias="NLF_SEED")

    run_root: str = Field(default="runs", alias="NLF_RUN_ROOT")


settings = Settings()


def resolve_seed(config_seed: int) -> int:
    """Experiment seed after the NLF_SEED override (re-read so tests can monkeypatch env)."""

    env_seed = Settings().seed
    return int(env_seed) if env_seed is not None else int(config_seed)


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(
    path: str | Path | None = None,
    *,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Resolve an experiment config: named preset, then TOML file keys, then ``overrides``.

    The TOML file may itself name a ``preset``; an explicit ``preset`` argument wins.
    """

    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            with p.open("rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {p}: {exc}") from None

    name = preset or data.get("preset") or "desk"
    factory = PRESETS.get(name)
    if factory is None:
        raise ConfigError(f"unknown preset {name!r}; choose one of {sorted(PRESETS)}")

    merged = _merge(factory().model_dump(), data)
    merged["preset"] = name
    if overrides:
        merged = _merge(merged, overrides)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from None
