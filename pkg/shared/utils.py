"""Shared utility functions for the moment-aware segmentation project."""

import os
import json
import hashlib
import logging
import tempfile
import subprocess
from pathlib import Path
from typing import Any, Union
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

_LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(name: str, level: str = "INFO") -> logging.Logger:
    """Set up logging for a project."""
    level_value = getattr(logging, level.upper(), None)
    if not isinstance(level_value, int):
        raise ValueError(f"Unknown log level: {level}")

    logging.basicConfig(
        level=level_value,
        format=_LOG_FORMAT,
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    logging.getLogger().setLevel(level_value)

    # Plotting backends are chatty at DEBUG
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)

    return logging.getLogger(name)


def stable_hash(payload: Any, length: int = 16) -> str:
    """Hash a JSON-serialisable payload independently of dict ordering."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:length]


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """Write bytes to ``path`` through a temp file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write UTF-8 text atomically."""
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Union[str, Path], data: Any) -> Path:
    """Write JSON atomically to prevent corruption."""
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True))


def build_identifier() -> str:
    """Return ``git describe`` output for the working tree, or "unknown"."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__))
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    described = result.stdout.strip()
    return described if result.returncode == 0 and described else "unknown"


class Colors:
    """ANSI color codes for terminal output."""
    HEADER = '\033[95m'
    OKBLUE = '\033[94m'
    OKCYAN = '\033[96m'
    OKGREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'


def print_colored(message: str, color: str = Colors.OKBLUE):
    """Print colored message to terminal."""
    # Handle Windows encoding issues
    try:
        print(f"{color}{message}{Colors.ENDC}")
    except UnicodeEncodeError:
        print(message)


def print_error(message: str):
    """Print an error message."""
    try:
        print(f"\n{Colors.FAIL}[ERROR]{Colors.ENDC} {message}")
    except UnicodeEncodeError:
        print(f"\n[ERROR] {message}")


def print_success(message: str):
    """Print a success message."""
    try:
        print(f"\n{Colors.OKGREEN}[SUCCESS]{Colors.ENDC} {message}")
    except UnicodeEncodeError:
        print(f"\n[SUCCESS] {message}")
