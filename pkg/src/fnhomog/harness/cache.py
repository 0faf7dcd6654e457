"""Pickle-per-key disk cache with atomic writes."""

from __future__ import annotations

import hashlib
import os
import pickle
import tempfile
from pathlib import Path

__all__ = ["CACHE_ENV", "DiskCache", "NullCache", "default_cache_dir"]

CACHE_ENV = "FNHOMOG_CACHE_DIR"


def default_cache_dir():
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "fnhomog"


class DiskCache:
    """Maps repr-able keys to pickled values under ``directory``.

    Writes go to a temporary file that is renamed into place, so readers
    never see partial entries and concurrent writers of one key are safe.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else default_cache_dir()
        self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _path(self, key):
        digest = hashlib.sha256(repr(key).encode()).hexdigest()
        return self.directory / digest[:2] / f"{digest}.pkl"

    def get(self, key):
        p = self._path(key)
        try:
            with open(p, "rb") as fh:
                stored_key, value = pickle.load(fh)
        except (FileNotFoundError, EOFError, pickle.UnpicklingError):
            self.misses += 1
            return None
        if stored_key != repr(key):
            self.misses += 1
            return None
        self.hits += 1
        return value

    def set(self, key, value):
        p = self._path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            pickle.dump((repr(key), value), fh)
        os.replace(tmp, p)

    def memo(self, key, fn):
        hit = self.get(key)
        if hit is not None:
            return hit
        value = fn()
        self.set(key, value)
        return value


class NullCache:
    """Cache interface that stores nothing."""

    hits = misses = 0

    def get(self, key):
        return None

    def set(self, key, value):
        pass

    def memo(self, key, fn):
        return fn()
