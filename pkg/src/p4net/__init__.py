"""Private personalized peer-to-peer learning with grouped proxy co-training."""
from .config import ExperimentConfig, parse_config
from .errors import (BudgetExhaustedError, ConfigError, NumericDomainError, P4NetError, ParameterError,
                     ParseError, ShapeError)
from .features import scatter_batch, scatter_transform
from .grouping import CollaborationGraph, form_groups, grouping_objective, random_groups
from .models import DistillPair, LinearClassifier, private_loss, proxy_loss
from .network import Bus, Message, MessageKind, deserialize, run_round, serialize
from .privacy import DpConfig, PrivacyLedger, calibrate_sigma, clip_gradient, privatize
from .runner import grid_search, run_experiment, run_fedavg, run_repeats

__version__ = "0.1.0"

__all__ = [
    "BudgetExhaustedError", "Bus", "CollaborationGraph", "ConfigError", "DistillPair", "DpConfig",
    "ExperimentConfig", "LinearClassifier", "Message", "MessageKind", "NumericDomainError", "P4NetError",
    "ParameterError", "ParseError", "PrivacyLedger", "ShapeError", "calibrate_sigma", "clip_gradient",
    "deserialize", "form_groups", "grid_search", "grouping_objective", "parse_config", "private_loss",
    "privatize", "proxy_loss", "random_groups", "run_experiment", "run_fedavg", "run_repeats", "run_round",
    "scatter_batch", "scatter_transform", "serialize",
]
