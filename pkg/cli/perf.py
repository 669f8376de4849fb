import platform
from importlib import metadata
from multiprocessing import cpu_count

import psutil

PACKAGES = ('numpy', 'scipy', 'pandas', 'pydantic', 'psutil')


def get_host_metrics() -> dict:
    """Host snapshot recorded in the run manifest"""
    memory = psutil.virtual_memory()
    return {
        "cpu_count": float(cpu_count()),
        "cpu_percent": psutil.cpu_percent(interval=0.1),
        "memory_percent": memory.percent,
        "memory_available_gb": memory.available / (1024**3),
    }


def default_workers() -> int:
    return min(cpu_count(), 8)


def resolve_workers(threads) -> int:
    """--threads if given, else min(cpu_count, 8)"""
    if threads is None:
        return default_workers()
    if threads < 1:
        raise ValueError(f"--threads must be >= 1, got {threads}")
    return int(threads)


def package_versions() -> dict:
    versions = {"python": platform.python_version()}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions
