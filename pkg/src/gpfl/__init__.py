"""Personalized federated learning with global category embeddings and a conditional valve.

numpy throughout; the fused kernels in :mod:`gpfl.kernels` use numba when it is
importable, and ``GPFL_DISABLE_NUMBA=1`` selects the pure-numpy versions.
"""

from .config import ExperimentConfig, parse_config
from .experiment import run_ablation, run_attack, run_experiment

__all__ = ["ExperimentConfig", "parse_config", "run_experiment", "run_ablation", "run_attack"]
__version__ = "0.1.0"
