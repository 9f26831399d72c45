"""Shared utilities for the moment-aware segmentation project."""

from .utils import (
    setup_logging,
    stable_hash,
    atomic_write_bytes,
    atomic_write_text,
    atomic_write_json,
    build_identifier,
    Colors,
    print_colored,
    print_error,
    print_success
)

__all__ = [
    'setup_logging',
    'stable_hash',
    'atomic_write_bytes',
    'atomic_write_text',
    'atomic_write_json',
    'build_identifier',
    'Colors',
    'print_colored',
    'print_error',
    'print_success'
]
