"""Classifier architectures, training and checkpoints."""

from .base import CLS, PAD, SEP, UNK, AttentionRecord, Batch, Classifier, TokenSequence, pack_segments
from .bilstm import BiLSTMClassifier, BiLSTMConfig, forward_bilstm
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .linear import LinearBagClassifier, LinearConfig
from .training import Adam, TrainingConfig, TrainingHistory, ablate_uniform, accuracy, train
from .transformer import TransformerClassifier, TransformerConfig, forward_transformer
from .vocab import Vocabulary

__all__ = [
    "CLS", "PAD", "SEP", "UNK", "AttentionRecord", "Batch", "Classifier", "TokenSequence",
    "pack_segments", "BiLSTMClassifier", "BiLSTMConfig", "forward_bilstm", "build_model",
    "load_checkpoint", "save_checkpoint", "LinearBagClassifier", "LinearConfig", "Adam",
    "TrainingConfig", "TrainingHistory", "ablate_uniform", "accuracy", "train",
    "TransformerClassifier", "TransformerConfig", "forward_transformer", "Vocabulary",
]
