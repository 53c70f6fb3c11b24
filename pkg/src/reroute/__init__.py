"""Test-time rerouting of Mixture-of-Experts router logits on a toy transformer."""

from reroute.model import ModelConfig, MoEModel, RouterTrace
from reroute.rerouter import DeltaSet, SessionConfig, SessionLog, optimize_deltas, run_session

__all__ = [
    "DeltaSet",
    "ModelConfig",
    "MoEModel",
    "RouterTrace",
    "SessionConfig",
    "SessionLog",
    "optimize_deltas",
    "run_session",
]

__version__ = "0.1.0"
