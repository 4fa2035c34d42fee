"""Command-line orchestration: config, training, evaluation, reports."""

from .config import RunConfig, apply_overrides, load_config

__all__ = ["RunConfig", "apply_overrides", "load_config"]
