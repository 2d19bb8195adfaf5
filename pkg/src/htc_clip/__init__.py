"""Hierarchical multi-label text classification with a contrastively
regularized encoder, a flat linear head and a path-guided hierarchy head."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifiers import LinearHead, PathHierarchyHead, count_parameters, pooled_inference
from .config import PRESETS, TrainConfig, resolve_config
from .contrastive import build_positive, gumbel_softmax_rows, nt_xent
from .corpus import Vocabulary, build_vocab, encode_text, gen_synthetic, load_dataset, make_batches
from .encoder import EncoderConfig, LabelGraphEncoder, TextEncoder
from .evaluation import MetricsReport, evaluate, macro_f1, micro_f1
from .model import HTCCLIP
from .taxonomy import LabelHierarchy, ancestor_closure, load_taxonomy, tree_distance
from .training import grad_check, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "EncoderConfig", "HTCCLIP", "LabelGraphEncoder", "LabelHierarchy", "LinearHead",
    "MetricsReport", "PRESETS", "PathHierarchyHead", "TextEncoder", "TrainConfig", "Vocabulary",
    "ancestor_closure", "build_positive", "build_vocab", "count_parameters", "encode_text", "evaluate",
    "gen_synthetic", "grad_check", "gumbel_softmax_rows", "load_checkpoint", "load_dataset",
    "load_taxonomy", "macro_f1", "make_batches", "micro_f1", "nt_xent", "pooled_inference",
    "resolve_config", "save_checkpoint", "total_loss", "train", "tree_distance",
]
