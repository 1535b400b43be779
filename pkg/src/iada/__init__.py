"""Importance-aware data augmentation for document-level translation, on a numpy autodiff core."""

from .augment import AugmentConfig, PerturbedView, perturb_document
from .corpus import Corpus, CorpusRecord, GeneratorConfig, generate
from .document import DocumentPair, make_pair
from .evaluate import EvalReport, bleu, memorization_eval, noisy_context_eval
from .importance import normalize, replacement_probs
from .model import Doc2DocTransformer, ModelConfig
from .objective import LossConfig, agreement, nll, total_loss
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Corpus",
    "CorpusRecord",
    "Doc2DocTransformer",
    "DocumentPair",
    "EvalReport",
    "GeneratorConfig",
    "LossConfig",
    "ModelConfig",
    "PerturbedView",
    "TrainConfig",
    "Trainer",
    "agreement",
    "bleu",
    "generate",
    "make_pair",
    "memorization_eval",
    "nll",
    "noisy_context_eval",
    "normalize",
    "perturb_document",
    "replacement_probs",
    "total_loss",
    "train",
]
