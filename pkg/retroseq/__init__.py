"""General imports.

isort:skip_file
"""
from __future__ import annotations

from retroseq._version import __version__
from retroseq.model.config import ModelConfig
from retroseq.model.network import RetroSeqModel
from retroseq.retrieve.embedder import FrozenEmbedder
from retroseq.retrieve.datastore import Database, build_classic, build_hybrid
from retroseq.pipeline.train import TrainConfig, train
from retroseq.pipeline.decode import beam_decode, evaluate
from retroseq.pipeline.metrics import corpus_bleu, r_overlap

__all__ = [
    "__version__",
    "ModelConfig",
    "RetroSeqModel",
    "FrozenEmbedder",
    "Database",
    "build_classic",
    "build_hybrid",
    "TrainConfig",
    "train",
    "beam_decode",
    "evaluate",
    "corpus_bleu",
    "r_overlap",
]
