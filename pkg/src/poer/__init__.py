"""Potential-energy ranking (PoER) with prototype classification, in numpy.

Submodules:
    energy: distances and the pair potential ``exp(beta * d) - 1``.
    losses: relation groups, ranking and cluster losses.
    prototypes: prototype-distance classifier.
    netcore: the MLP feature extractor, AdamW and gradient checking.
    synthgen: the synthetic multi-domain generator and splits.
    trainer: training, evaluation, audits and checkpoints.
    cli: the ``poer`` command.
"""

from .energy import EnergyConfig, pair_potential, pairwise_energy_matrix, potential_difference
from .exceptions import (
    ConfigurationError, DegenerateBatchError, DivergenceError, InvalidArgumentError, PoerError, StateError,
    VersionMismatchError,
)
from .losses import LossConfig, cluster_loss, poer_loss, rank_loss, relation_groups
from .netcore import ExtractorConfig, grad_check, objective
from .prototypes import class_probabilities, classification_loss, predict
from .synthgen import DatasetSpec, generate, leave_one_domain_out, target_rho
from .trainer import (
    Checkpoint, MetricsReport, TrainConfig, confidence_interval, evaluate, load_checkpoint,
    rank_violation_audit, save_checkpoint, train,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigurationError", "DatasetSpec", "DegenerateBatchError", "DivergenceError",
    "EnergyConfig", "ExtractorConfig", "InvalidArgumentError", "LossConfig", "MetricsReport", "PoerError",
    "StateError", "TrainConfig", "VersionMismatchError", "class_probabilities", "classification_loss",
    "cluster_loss", "confidence_interval", "evaluate", "generate", "grad_check", "leave_one_domain_out",
    "load_checkpoint", "objective", "pair_potential", "pairwise_energy_matrix", "poer_loss",
    "potential_difference", "predict", "rank_loss", "rank_violation_audit", "relation_groups",
    "save_checkpoint", "target_rho", "train",
]
