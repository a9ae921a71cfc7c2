"""Fairness-constrained lending: environment, tabular PPO, and causal parity analysis."""

from .analysis import DecompositionReport, decompose, parity
from .config import load_config, load_preset
from .env import ConfigError, DomainError, EnvConfig
from .policy import PolicyParams
from .trainer import TrainConfig, train

__version__ = "0.1.0"
