"""Configuration, caching, CSV output and the command line."""

from .cache import CACHE_ENV, DiskCache, NullCache
from .config import ConfigError, ExperimentConfig, parse_config
from .csvio import load_schema, read_csv, write_csv
from .run import RunRecord, run, run_moments

__all__ = [
    "CACHE_ENV",
    "DiskCache",
    "NullCache",
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "load_schema",
    "read_csv",
    "write_csv",
    "RunRecord",
    "run",
    "run_moments",
]
