"""Continual learning with Douglas-Rachford splitting of task loss and weighted l1 retention."""
from .errors import DRCLError
from .fisher import ImportanceWeights, estimate_fisher, mean_normalize
from .model import Batch, NetworkSpec, init_params, loss_and_grad
from .solver import SolverConfig, prox_l1_weighted, run_task

__version__ = "0.1.0"

__all__ = ["Batch", "DRCLError", "ImportanceWeights", "NetworkSpec", "SolverConfig", "estimate_fisher",
           "init_params", "loss_and_grad", "mean_normalize", "prox_l1_weighted", "run_task"]
