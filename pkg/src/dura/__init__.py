"""Evidential uncertainty and robust ranking for retrieval under noisy image-text correspondence."""
from .data import EvidenceSplitter, GenConfig, NoisyPairedDataset, generate, inject_noise, split_clean_noisy
from .estimator import DuraRetriever
from .evidence import EvidenceConfig, build_opinion, extract_evidence
from .losses import BatchLabels, DshSchedule, LossConfig, loss_dsh, loss_evidential, loss_tal, loss_total, loss_triplet
from .metrics import EvalReport, evaluate
from .trainer import METHODS, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BatchLabels",
    "DshSchedule",
    "DuraRetriever",
    "EvalReport",
    "EvidenceConfig",
    "EvidenceSplitter",
    "GenConfig",
    "LossConfig",
    "METHODS",
    "NoisyPairedDataset",
    "TrainConfig",
    "build_opinion",
    "evaluate",
    "extract_evidence",
    "generate",
    "inject_noise",
    "loss_dsh",
    "loss_evidential",
    "loss_tal",
    "loss_total",
    "loss_triplet",
    "split_clean_noisy",
    "train",
]
