"""Configuration, persistence, reports, and the CLI."""

from . import checkpoint, config, runner

__all__ = ["checkpoint", "config", "runner"]
