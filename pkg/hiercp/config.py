import logging
import os
from pathlib import Path

import sentry_sdk

from hiercp import HierCPError

OPTIONAL_ENVIRONMENT_VARIABLES = [
    "HIERCP_THREADS",
    "LOG_LEVEL",
    "SENTRY_DSN",
    "WORKSPACE",
]


class ConfigError(HierCPError):
    """Exception raised for malformed configuration files or values."""


def configure_logger(logger: logging.Logger, log_level_string: str) -> str:
    if log_level_string.upper() not in logging.getLevelNamesMapping():
        message = f"'{log_level_string}' is not a valid Python logging level"
        raise ValueError(message)
    log_level = logging.getLevelName(log_level_string.upper())
    if log_level < logging.INFO:
        logging.basicConfig(
            format="%(asctime)s %(levelname)s %(name)s.%(funcName)s() line %(lineno)d: "
            "%(message)s"
        )
        logger.setLevel(log_level)
        for handler in logging.root.handlers:
            handler.addFilter(logging.Filter("hiercp"))
    else:
        logging.basicConfig(
            format="%(asctime)s %(levelname)s %(name)s.%(funcName)s(): %(message)s"
        )
        logger.setLevel(log_level)
    return (
        f"Logger '{logger.name}' configured with level="
        f"{logging.getLevelName(logger.getEffectiveLevel())}"
    )


def configure_sentry() -> str:
    env = os.getenv("WORKSPACE")
    sentry_dsn = os.getenv("SENTRY_DSN")
    if sentry_dsn and sentry_dsn.lower() != "none":
        sentry_sdk.init(sentry_dsn, environment=env)
        return f"Sentry DSN found, exceptions will be sent to Sentry with env={env}"
    return "No Sentry DSN found, exceptions will not be sent to Sentry"


def load_config_values() -> dict:
    settings = {
        variable: os.environ[variable]
        for variable in OPTIONAL_ENVIRONMENT_VARIABLES
        if variable in os.environ
    }
    settings["THREADS"] = worker_count(settings.get("HIERCP_THREADS"))
    return settings


def worker_count(value: str | None) -> int:
    """Parse the worker cap, falling back to the machine's parallelism."""
    if value is None or value.strip() == "":
        return os.cpu_count() or 1
    try:
        threads = int(value)
    except ValueError as exc:
        message = f"HIERCP_THREADS must be a positive integer, got '{value}'"
        raise ConfigError(message) from exc
    if threads < 1:
        message = f"HIERCP_THREADS must be a positive integer, got '{value}'"
        raise ConfigError(message)
    return threads


def read_key_value_file(path: str | Path) -> dict[str, str]:
    """Read a plain-text `key=value` configuration file.

    Blank lines and lines starting with `#` are ignored. Keys and values are stripped of
    surrounding whitespace.

    Raises:
        ConfigError: if a line has no `=` or a key is repeated.
        OSError: if the file cannot be read.
    """
    with open(path, encoding="utf-8") as config_file:
        return parse_key_value_lines(config_file.read().splitlines())


def parse_key_value_lines(lines: list[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_number, raw_line in enumerate(lines, start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, separator, value = line.partition("=")
        key = key.strip()
        if not separator or not key:
            message = f"Line {line_number} is not a key=value pair: '{raw_line}'"
            raise ConfigError(message)
        if key in values:
            message = f"Duplicate key '{key}' on line {line_number}"
            raise ConfigError(message)
        values[key] = value.strip()
    return values


def reject_unknown_keys(values: dict[str, str], known: set[str], source: str) -> None:
    unknown = sorted(set(values) - known)
    if unknown:
        message = f"Unknown {source} key(s): {', '.join(unknown)}"
        raise ConfigError(message)
