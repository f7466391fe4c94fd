"""ADMM-based semi-structured pattern pruning for small transformer encoders."""

from .admm import AdmmState, init_state, is_feasible, penalty, project
from .errors import ConfigError, DimensionError, InputError, NumericError, ParseError, StateError
from .pattern import PatternPool, ProjectionMode, SparsityConfig, nm_config, pattern_prune
from .srste import SrsteConfig

__version__ = "0.1.0"

__all__ = [
    "AdmmState", "ConfigError", "DimensionError", "InputError", "NumericError", "ParseError",
    "PatternPool", "ProjectionMode", "SparsityConfig", "SrsteConfig", "StateError",
    "init_state", "is_feasible", "nm_config", "pattern_prune", "penalty", "project",
]
