"""Shared-bottom multi-task learning with under-parameterized self-auxiliary towers."""

from .estimator import MultiTaskNetwork
from .harness import ExperimentConfig, RunRecord, SweepSpec, run_sweep, run_trial
from .model import ArchitectureSpec, AuxTowerSpec, HeadSpec, build_model, load_preset, mlp_spec
from .pareto import ParetoPoint, hypervolume_2d, pareto_filter

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "AuxTowerSpec",
    "ExperimentConfig",
    "HeadSpec",
    "MultiTaskNetwork",
    "ParetoPoint",
    "RunRecord",
    "SweepSpec",
    "build_model",
    "hypervolume_2d",
    "load_preset",
    "mlp_spec",
    "pareto_filter",
    "run_sweep",
    "run_trial",
]
