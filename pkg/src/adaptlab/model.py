"""Composition of backbone, adapter bank, and classification head.

The trainable set depends on the mode:

* ``peft``        frozen backbone, trainable adapter + head
* ``full_tune``   everything trainable (toy scale only)
* ``frozen_only`` nothing trainable (null baseline: untrained head on a
  frozen random backbone)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import AdapterBank, AdapterConfig, build_adapter_bank
from .encoder import (
    EncoderConfig,
    ModelConfigError,
    classify,
    encoder_forward,
    init_encoder_params,
    init_head_params,
    scores_from_logits,
)
from .params import ParamStore
from .rng import SplitRng
from .tensor import Tensor

MODES = ("peft", "full_tune", "frozen_only")


@dataclass
class SpoofModel:
    encoder_cfg: EncoderConfig
    adapter_cfg: AdapterConfig
    store: ParamStore
    bank: AdapterBank
    mode: str
    dtype: np.dtype

    def forward(self, x: Tensor) -> Tensor:
        """Feature frames [B, T, F] -> logits [B, 2] (graph-building)."""
        hidden, pool_start = encoder_forward(self.encoder_cfg, self.store, x, self.bank)
        return classify(self.store, hidden, pool_start)

    def scores(self, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Detection scores (bonafide minus spoof logit), no graph."""
        out = np.empty(len(features), dtype=np.float64)
        with T.no_grad():
            for lo in range(0, len(features), batch_size):
                batch = np.asarray(features[lo:lo + batch_size], dtype=self.dtype)
                logits = self.forward(Tensor(batch))
                out[lo:lo + len(batch)] = scores_from_logits(logits.data)
        return out

    def num_trainable(self, exclude_head: bool = False) -> int:
        exclude = ("head",) if exclude_head else ()
        return self.store.num_params(trainable_only=True, exclude_groups=exclude)


def build_model(
    encoder_cfg: EncoderConfig,
    adapter_cfg: AdapterConfig,
    seed: int = 0,
    mode: str = "peft",
    dtype=np.float32,
    zero_init: bool = False,
) -> SpoofModel:
    """Instantiate parameters and wire the adapter bank.

    Parameter content is a pure function of (configs, seed, dtype).
    """
    if mode not in MODES:
        raise ModelConfigError(f"unknown mode {mode!r}; have {MODES}")
    dtype = np.dtype(dtype)
    root = SplitRng(seed)
    store = ParamStore()

    backbone_trainable = mode == "full_tune"
    adapter_trainable = mode != "frozen_only"
    head_trainable = mode in ("peft", "full_tune")

    init_encoder_params(encoder_cfg, store, root.child(0), dtype=dtype,
                        trainable=backbone_trainable, zero_init=zero_init)
    init_head_params(encoder_cfg, store, root.child(2), dtype=dtype,
                     trainable=head_trainable, zero_init=zero_init)
    bank = build_adapter_bank(
        encoder_cfg.num_layers, encoder_cfg.model_dim, adapter_cfg, store,
        root.child(1), dtype=dtype, trainable=adapter_trainable, zero_init=zero_init,
    )
    return SpoofModel(encoder_cfg, adapter_cfg, store, bank, mode, dtype)
