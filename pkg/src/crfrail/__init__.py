"""Cause-specific frailty models for clustered competing risks with missing event types."""
from pathlib import Path

__version__ = "0.1.0"


def toy_path(name: str) -> Path:
    """Path of a bundled toy file: ``toy_main.csv``, ``toy_train.csv`` or ``toy_scenario.yaml``."""
    path = Path(__file__).with_name("toy") / name
    if not path.exists():
        raise FileNotFoundError(f"no bundled toy file {name!r}")
    return path
