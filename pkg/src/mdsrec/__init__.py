"""Multimodal difference-learning sequential recommendation on numpy."""
from .data import (InteractionDataset, ModalFeatureTable, SplitDataset, SynthSpec, load_interactions,
                   load_modal_features, make_batches, split_leave_one_out, synth_generate)
from .evaluation import RankingReport, evaluate
from .model import MDSRec, ModelConfig
from .trainer import fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "InteractionDataset", "ModalFeatureTable", "SplitDataset", "SynthSpec", "load_interactions",
    "load_modal_features", "make_batches", "split_leave_one_out", "synth_generate", "RankingReport",
    "evaluate", "MDSRec", "ModelConfig", "fit", "load_checkpoint", "save_checkpoint", "__version__",
]
