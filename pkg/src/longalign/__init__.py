"""Longitudinal two-image risk prediction with explicit alignment strategies."""

from . import data, fields, metrics, phantom, regnet, risk
from .errors import ConfigError, DataError

__all__ = ["data", "fields", "metrics", "phantom", "regnet", "risk", "ConfigError", "DataError"]
