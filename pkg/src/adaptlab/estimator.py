"""scikit-learn estimator wrapper around the adapter training stack.

``SpoofDetector`` exposes the lab's model through the standard
fit/predict surface so it composes with sklearn tooling (``clone``,
pipelines, CV splitters that can handle 3-d inputs). X is an array of
feature sequences [n_samples, frames, features]; y holds two classes
where the numerically larger label is treated as bonafide (positive).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .adapters import AdapterConfig
from .data import LABEL_BONAFIDE, LABEL_SPOOF, Corpus, SpoofRecord
from .encoder import EncoderConfig
from .metrics import ScoreSet, compute_eer
from .model import build_model
from .training import TrainConfig, train


def check_sequence_array(X, *, frames: int | None = None, features: int | None = None) -> np.ndarray:
    """Validate a [n_samples, frames, features] float array."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(
            f"expected X with shape [n_samples, frames, features], got {arr.shape}"
        )
    if arr.shape[0] == 0:
        raise ValueError("X has no samples")
    if not np.isfinite(arr).all():
        raise ValueError("X contains non-finite values")
    if frames is not None and arr.shape[1] != frames:
        raise ValueError(f"X has {arr.shape[1]} frames, the fitted model expects {frames}")
    if features is not None and arr.shape[2] != features:
        raise ValueError(f"X has {arr.shape[2]} features, the fitted model expects {features}")
    return arr


class SpoofDetector(BaseEstimator, ClassifierMixin):
    """Frozen-backbone detector fine-tuned with a configurable PEFT method.

    Parameters mirror the lab's config dataclasses but stay flat and
    sklearn-clonable. Defaults are the desk-scale (toy) setup.

    Attributes after ``fit``: ``classes_``, ``model_``, ``train_log_``,
    ``best_dev_eer_``, ``n_features_in_``, ``n_frames_in_``.
    """

    def __init__(
        self,
        adapter: str = "multiconv",
        kernels: tuple[int, ...] = (3, 7, 15, 23),
        bottleneck: int = 16,
        fusion: str = "mixup_conv",
        placement: str = "mhsa",
        rank: int = 8,
        prompt_tokens: int = 16,
        layers: int = 2,
        model_dim: int = 64,
        inner_dim: int = 128,
        heads: int = 4,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        epochs: int = 10,
        batch_size: int = 32,
        mode: str = "peft",
        seed: int = 0,
    ):
        self.adapter = adapter
        self.kernels = kernels
        self.bottleneck = bottleneck
        self.fusion = fusion
        self.placement = placement
        self.rank = rank
        self.prompt_tokens = prompt_tokens
        self.layers = layers
        self.model_dim = model_dim
        self.inner_dim = inner_dim
        self.heads = heads
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.mode = mode
        self.seed = seed

    # -- config assembly -------------------------------------------------

    def _encoder_config(self, frames: int, features: int) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.layers,
            model_dim=self.model_dim,
            inner_dim=self.inner_dim,
            num_heads=self.heads,
            feature_dim=features,
            max_seq_len=max(frames + self.prompt_tokens, 16),
        )

    def _adapter_config(self) -> AdapterConfig:
        return AdapterConfig(
            variant=self.adapter,
            kernels=tuple(self.kernels),
            bottleneck=self.bottleneck,
            fusion=self.fusion,
            placement=self.placement,
            rank=self.rank,
            prompt_tokens=self.prompt_tokens,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            mode=self.mode,
        )

    # -- sklearn surface ---------------------------------------------------

    def fit(self, X, y) -> "SpoofDetector":
        X = check_sequence_array(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        classes = np.unique(y)
        if len(classes) != 2:
            raise ValueError(f"need exactly 2 classes, got {classes!r}")
        self.classes_ = classes
        self.n_frames_in_ = X.shape[1]
        self.n_features_in_ = X.shape[2]

        records = []
        for i, (seq, label) in enumerate(zip(X, y)):
            bona = label == classes[1]
            records.append(
                SpoofRecord(
                    id=i,
                    label=LABEL_BONAFIDE if bona else LABEL_SPOOF,
                    artifact_class="none" if bona else "mixed",
                    features=seq.astype(np.float32),
                )
            )
        corpus = Corpus(records, X.shape[1], X.shape[2])

        model = build_model(
            self._encoder_config(X.shape[1], X.shape[2]),
            self._adapter_config(),
            seed=self.seed,
            mode=self.mode,
        )
        result = train(model, corpus, self._train_config())
        model.store.restore(result.best_state)
        self.model_ = model
        self.train_log_ = result.log
        self.best_dev_eer_ = result.best_dev_eer
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError("this SpoofDetector is not fitted yet; call fit first")

    def decision_function(self, X) -> np.ndarray:
        """Bonafide-minus-spoof logit per sequence (higher = more genuine)."""
        self._require_fitted()
        X = check_sequence_array(X, frames=self.n_frames_in_, features=self.n_features_in_)
        return self.model_.scores(X.astype(np.float32), batch_size=self.batch_size)

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    def predict_proba(self, X) -> np.ndarray:
        """Column order follows ``classes_`` (spoof-like first)."""
        self._require_fitted()
        score = self.decision_function(X)
        p_bona = 1.0 / (1.0 + np.exp(-score))
        return np.column_stack([1.0 - p_bona, p_bona])

    def eer(self, X, y) -> float:
        """Equal error rate (percent) of the detector on labeled data."""
        self._require_fitted()
        y = np.asarray(y)
        labels = np.where(y == self.classes_[1], LABEL_BONAFIDE, LABEL_SPOOF)
        return compute_eer(ScoreSet(labels, self.decision_function(X))).eer_percent
