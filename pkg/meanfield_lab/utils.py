"""
Utility functions for the lab.
Includes config hashing, result caching and the worker pool.
"""

import os
import time
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)

THREADS_ENV = "MEANFIELD_THREADS"


class ResultCache:
    """In-memory cache of expensive solver results keyed by content hash."""

    def __init__(self, ttl_seconds: Optional[float] = None, max_entries: Optional[int] = None):
        """
        Initialize cache.

        Args:
            ttl_seconds: Time to live for cached items, None keeps them forever
            max_entries: Bound on stored items, the oldest is evicted first
        """
        if max_entries is not None and max_entries < 1:
            raise ValueError("max_entries must be >= 1")
        self.ttl_seconds = ttl_seconds
        self.max_entries = max_entries
        self.cache: Dict[str, tuple[Any, float]] = {}

    def get(self, key: str) -> Optional[Any]:
        """
        Get value from cache.

        Args:
            key: Cache key

        Returns:
            Cached value or None if not found or expired
        """
        if key in self.cache:
            value, timestamp = self.cache[key]
            if self.ttl_seconds is None or time.monotonic() - timestamp < self.ttl_seconds:
                logger.debug(f"Cache hit for key: {key[:16]}...")
                return value
            del self.cache[key]
            logger.debug(f"Cache expired for key: {key[:16]}...")
        return None

    def set(self, key: str, value: Any) -> None:
        self.cache.pop(key, None)
        self.cache[key] = (value, time.monotonic())
        logger.debug(f"Cache set for key: {key[:16]}...")
        if self.max_entries is not None:
            # dicts keep insertion order, so the first key is the oldest
            while len(self.cache) > self.max_entries:
                oldest = next(iter(self.cache))
                del self.cache[oldest]
                logger.debug(f"Cache evicted key: {oldest[:16]}...")

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        """Return the cached value or compute, store and return it."""
        value = self.get(key)
        if value is None:
            value = compute()
            self.set(key, value)
        return value

    def clear(self) -> None:
        self.cache.clear()
        logger.info("Cache cleared")


def hash_text(text: str) -> str:
    """
    SHA256 hex digest of a text, used for config and cache keys.

    Args:
        text: Text to hash

    Returns:
        64-character hex digest
    """
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def format_timestamp() -> str:
    """Current UTC time in ISO format, used only in manifests."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def resolve_workers(configured: Optional[int] = None) -> int:
    """
    Worker count: MEANFIELD_THREADS wins over the config key, default is the
    machine parallelism.

    Args:
        configured: Value of the ``workers`` config key, if any

    Returns:
        Positive worker count
    """
    env_value = os.getenv(THREADS_ENV)
    if env_value:
        try:
            workers = int(env_value)
            if workers >= 1:
                return workers
        except ValueError:
            pass
        logger.warning(f"Ignoring invalid {THREADS_ENV}={env_value!r}")
    if configured is not None and configured >= 1:
        return configured
    return os.cpu_count() or 1


def parallel_map(func: Callable[[Any], Any], items: Iterable[Any], workers: int = 1) -> List[Any]:
    """
    Map ``func`` over ``items`` with a process pool, keeping input order.

    Args:
        func: Picklable callable
        items: Work items
        workers: Process count; 1 runs in-process

    Returns:
        Results in the order of ``items``
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items, chunksize=chunksize))
