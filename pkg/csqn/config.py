"""Configuration loading, dotted overrides and environment defaults."""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from csqn.errors import ConfigError, DataMissingError
from csqn.schemas import ExperimentConfig

load_dotenv()

DATA_DIR = os.getenv("CSQN_DATA")
OUTPUT_ROOT = os.getenv("CSQN_OUTPUT", "./runs")
LOG_LEVEL = os.getenv("CSQN_LOG_LEVEL", "INFO")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Fields that do not change what a run computes.
_UNGROUPED_KEYS = ("seed", "output_dir", "threads")


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once for command-line use."""
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)


def parse_value(raw: str) -> Any:
    """Parse an override value as JSON, falling back to the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides to a raw config document in place."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override key '{key}' is malformed")
        node = document
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{key}' descends into non-object '{part}'")
            node = child
        node[parts[-1]] = parse_value(raw.strip())
    return document


def build_config(document: Dict[str, Any]) -> ExperimentConfig:
    """Validate a raw document into an ExperimentConfig."""
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}")


def read_document(path: Optional[str]) -> Dict[str, Any]:
    """Read a JSON config file; no path means all defaults."""
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        document = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"config file {config_path} must hold a JSON object")
    return document


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read, override and validate an experiment configuration."""
    document = read_document(path)
    apply_overrides(document, overrides)
    return build_config(document)


def canonical_hash(payload: Dict[str, Any]) -> str:
    """SHA-256 of sorted-key JSON; stable under key reordering."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    return canonical_hash(config.echo())


def group_hash(config: ExperimentConfig) -> str:
    """Hash shared by seed replicates of the same experiment."""
    echo = config.echo()
    for key in _UNGROUPED_KEYS:
        echo.pop(key, None)
    return canonical_hash(echo)


def resolve_data_dir(cli_value: Optional[str]) -> Path:
    """Resolve the MNIST directory from --data or CSQN_DATA."""
    value = cli_value or os.getenv("CSQN_DATA") or DATA_DIR
    if not value:
        raise DataMissingError("no MNIST directory given (use --data or set CSQN_DATA)")
    path = Path(value)
    if not path.is_dir():
        raise DataMissingError(f"MNIST directory not found: {path}")
    return path
