"""Layered tool configuration.

Precedence for every key, highest first: command-line flag, environment
variable (CWEKIT_<KEY>), config file entry, built-in default. The config file
is a flat key = value document; '#' starts a comment line.

Credentials never live in flags or files: the api_key_env key only names the
environment variable the key is read from.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .errors import CwekitError

ENV_PREFIX = "CWEKIT_"

DEFAULT_INSTRUCTION = (
    "Analyze the following Python code snippet and determine whether it contains "
    "one of the MITRE Top 25 CWE weaknesses. Respond with 'Vulnerable - CWE-<id>' "
    "or 'Secure'."
)


class ConfigError(CwekitError):
    pass


@dataclass(frozen=True)
class ToolConfig:
    backend_url: str = "http://127.0.0.1:8008"
    backend_adapter: str = "native"
    api_key_env: str = "CWEKIT_API_KEY"
    timeout_seconds: float = 60.0
    instruction: str = DEFAULT_INSTRUCTION
    instruction_file: str = ""
    catalog_path: str = ""
    review_dir: str = "review_store"
    ui_dir: str = ""
    generation_backend: str = "http"  # http | fixture
    generation_url: str = ""  # empty: fall back to backend_url
    fixture_dir: str = ""
    pairs_per_cwe: int = 10
    generation_max_retries: int = 2
    generation_temperature: float = 0.9
    generation_max_new_tokens: int = 2048
    eval_max_new_tokens: int = 32
    eval_concurrency: int = 1
    eval_max_error_rate: float = 0.0
    bench_warmup: int = 1
    bench_measured: int = 5
    bench_max_new_tokens: int = 64
    bench_host: str = ""
    test_size: int = 100
    seed: int = 1337
    scan_max_bytes: int = 65536
    scan_jobs: int = 1
    reviewer: str = "reviewer"


KEYS = {f.name: f.type for f in dataclasses.fields(ToolConfig)}
_TYPES = {f.name: type(getattr(ToolConfig(), f.name)) for f in dataclasses.fields(ToolConfig)}


def parse_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        if key not in KEYS:
            raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value: object, origin: str):
    target = _TYPES[key]
    if isinstance(value, target) and not (target is float and isinstance(value, bool)):
        return value
    if target is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{origin}: {key} has unusable type {type(value).__name__}")
    try:
        if target is int:
            return int(value)
        if target is float:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{origin}: {key} must be a {target.__name__}: {exc}") from exc
    return value


def resolve_config(flags: Mapping[str, object] | None = None,
                   env: Mapping[str, str] | None = None,
                   config_path: str | Path | None = None) -> ToolConfig:
    """Resolve the effective configuration with full precedence.

    `flags` holds already-parsed command-line values keyed by config key;
    None values count as unset so argparse defaults don't mask lower layers.
    """
    flags = flags or {}
    env = env or {}
    file_values = parse_kv_file(config_path) if config_path else {}

    unknown = [k for k in flags if k not in KEYS]
    if unknown:
        raise ConfigError(f"unknown config key(s) from flags: {sorted(unknown)}")

    resolved: dict[str, object] = {}
    for key in KEYS:
        if flags.get(key) is not None:
            resolved[key] = _coerce(key, flags[key], "flag")
        elif (env_value := env.get(ENV_PREFIX + key.upper())) is not None:
            resolved[key] = _coerce(key, env_value, f"env {ENV_PREFIX + key.upper()}")
        elif key in file_values:
            resolved[key] = _coerce(key, file_values[key], "config file")
        else:
            resolved[key] = getattr(ToolConfig(), key)
    return ToolConfig(**resolved)


def resolve_instruction(config: ToolConfig) -> str:
    """The instruction text, from file when configured, inline otherwise."""
    if config.instruction_file:
        try:
            text = Path(config.instruction_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read instruction file: {exc}") from exc
        if text.endswith("\n"):
            text = text[:-1]
        if not text.strip():
            raise ConfigError(f"instruction file {config.instruction_file} is empty")
        return text
    return config.instruction


def resolve_api_key(config: ToolConfig, env: Mapping[str, str]) -> str | None:
    return env.get(config.api_key_env) or None
