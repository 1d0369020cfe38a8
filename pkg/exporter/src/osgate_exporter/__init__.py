"""Thin bridge from embedding-capable detectors to osgate dataset containers."""

from .config import ExportConfig
from .export import ExportStats, run_export
from .verify import container_checksum, run_verify

__version__ = "0.1.0"
