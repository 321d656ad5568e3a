"""adaptlab: a desk-scale lab for parameter-efficient adapter fine-tuning.

The package bundles a small reverse-mode autodiff engine, a transformer
encoder, the multi-scale convolutional adapter plus baseline PEFT
methods, exact parameter auditing, a synthetic multi-scale spoof
benchmark, and a deterministic training/EER harness. The public model
surface is the sklearn-style :class:`SpoofDetector`.
"""

from .adapters import AdapterBank, AdapterConfig, build_adapter_bank
from .audit import AuditReport, audit, audit_table
from .configfile import ExperimentConfig, load_config, parse_config_text, render_config
from .data import Corpus, CorpusSpec, SpoofRecord, generate, read_corpus, write_corpus
from .encoder import EncoderConfig, encoder_preset
from .estimator import SpoofDetector
from .metrics import EvalResult, ScoreSet, compute_eer
from .model import SpoofModel, build_model
from .params import ParamStore
from .rng import SplitRng
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, adam_step, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "AdapterBank",
    "AdapterConfig",
    "AuditReport",
    "Corpus",
    "CorpusSpec",
    "EncoderConfig",
    "EvalResult",
    "ExperimentConfig",
    "ParamStore",
    "ScoreSet",
    "SplitRng",
    "SpoofDetector",
    "SpoofModel",
    "SpoofRecord",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "audit",
    "audit_table",
    "backward",
    "build_adapter_bank",
    "build_model",
    "compute_eer",
    "encoder_preset",
    "generate",
    "load_config",
    "no_grad",
    "parse_config_text",
    "read_corpus",
    "render_config",
    "run_ablation",
    "train",
    "write_corpus",
]
