"""Offline policy learning with eligible-action constraints.

Importance-sampling estimators, eligible-action neighborhoods, softmax
policy learners (POELA, PO-CRM, PO-mu), counterexample environments,
BCa bootstrap intervals and an experiment harness.
"""
from .data import Dataset, SplitSpec, Trajectory, load_dataset, save_dataset, split
from .errors import (BootstrapUnstableError, DatasetError, NoOverlapError, PoelaError,
                     TrainingError, UnsupportedInputError)
from .estimators import Estimate, compute_weights, ess, is_value, sntis_value
from .learners import TrainConfig, select_checkpoint, train_pocrm, train_poela, train_pomu

__version__ = "0.1.0"
