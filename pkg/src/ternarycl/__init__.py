"""Contrastive representation learning and link prediction for sparse
open knowledge graphs."""

from .config import ModelConfig, RunConfig, TrainConfig, load_config, save_config
from .kg_data import (
    DatasetBundle,
    SynonymTable,
    Triple,
    Vocabulary,
    extract_shot_slices,
    load_dataset,
    mine_synonyms,
    slice_sparsity,
)
from .tensor_math import Tape, finite_diff_check

__all__ = [
    "ModelConfig", "RunConfig", "TrainConfig", "load_config", "save_config",
    "DatasetBundle", "SynonymTable", "Triple", "Vocabulary",
    "extract_shot_slices", "load_dataset", "mine_synonyms", "slice_sparsity",
    "Tape", "finite_diff_check",
]

__version__ = "0.1.0"
