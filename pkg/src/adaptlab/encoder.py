"""Transformer encoder over feature-frame sequences, with adapter hooks.

The encoder consumes precomputed feature frames [B, T, F] (no waveform
front-end), projects them to the model width, adds sinusoidal positions,
and runs pre-norm blocks:

    a = MHSA(LN1(h));  h <- h + a + AdapterMHSA(a)
    f = FFN(LN2(h));   h <- h + f + AdapterFFN(f)

followed by a final LayerNorm. Adapter branches read the sublayer output
and add into the residual stream in parallel, so a zero-initialized
final projection leaves the encoder output bit-identical to the
adapter-free forward. A post-norm variant exists behind a config flag
for comparison; the presets all use pre-norm.

Attention is unmasked and sequences are fixed-length, so no padding
logic exists anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .params import ParamStore
from .rng import SplitRng
from .tensor import Tensor


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    inner_dim: int = 128
    num_heads: int = 4
    feature_dim: int = 16
    max_seq_len: int = 512
    pre_norm: bool = True
    positions: str = "sinusoidal"  # or "none"

    def __post_init__(self) -> None:
        for field in ("num_layers", "model_dim", "inner_dim", "num_heads", "feature_dim", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ModelConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.model_dim % self.num_heads != 0:
            raise ModelConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.positions not in ("sinusoidal", "none"):
            raise ModelConfigError(f"unknown positions mode {self.positions!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


ENCODER_PRESETS: dict[str, EncoderConfig] = {
    # XLSR-sized context network; used for parameter audits, never trained here.
    "xlsr": EncoderConfig(num_layers=24, model_dim=1024, inner_dim=4096, num_heads=16),
    "toy": EncoderConfig(num_layers=2, model_dim=64, inner_dim=128, num_heads=4),
}


def encoder_preset(name: str, **overrides) -> EncoderConfig:
    if name not in ENCODER_PRESETS:
        raise ModelConfigError(f"unknown encoder preset {name!r}; have {sorted(ENCODER_PRESETS)}")
    cfg = ENCODER_PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg


# -- initialization -----------------------------------------------------


def xavier_uniform(gen: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape).astype(dtype)


# Query/key init gain > 1 sharpens the random attention at init. With a
# frozen random backbone, unit-gain attention is near-uniform over T, which
# collapses the temporal structure the adapters are supposed to read.
_QK_INIT_GAIN = 2.0


def init_encoder_params(
    cfg: EncoderConfig,
    store: ParamStore,
    rng: SplitRng,
    dtype=np.float32,
    trainable: bool = False,
    zero_init: bool = False,
) -> None:
    """Register all backbone parameters (the head registers separately).

    ``zero_init`` skips random fills so shape-only audits of large
    presets stay fast (np.zeros never touches the pages).
    """
    d, dff, f = cfg.model_dim, cfg.inner_dim, cfg.feature_dim

    def weight(name: str, fan_in: int, fan_out: int, shape, stream: SplitRng,
               group="backbone", train=trainable, gain=1.0):
        if zero_init:
            data = np.zeros(shape, dtype=dtype)
        else:
            data = xavier_uniform(stream.generator(), fan_in, fan_out, shape, dtype)
            if gain != 1.0:
                data *= np.asarray(gain, dtype=data.dtype)
        store.register(name, Tensor(data), trainable=train, group=group)

    def vector(name: str, size: int, fill: float, group="backbone", train=trainable):
        data = np.full(size, fill, dtype=dtype) if fill else np.zeros(size, dtype=dtype)
        store.register(name, Tensor(data), trainable=train, group=group)

    weight("input_proj.weight", f, d, (f, d), rng.child(0))
    vector("input_proj.bias", d, 0.0)
    for i in range(cfg.num_layers):
        layer_rng = rng.child(100 + i)
        prefix = f"layers.{i}"
        vector(f"{prefix}.ln1.weight", d, 1.0)
        vector(f"{prefix}.ln1.bias", d, 0.0)
        for j, proj in enumerate(("q", "k", "v", "out")):
            gain = _QK_INIT_GAIN if proj in ("q", "k") else 1.0
            weight(f"{prefix}.attn.{proj}.weight", d, d, (d, d), layer_rng.child(j), gain=gain)
            vector(f"{prefix}.attn.{proj}.bias", d, 0.0)
        vector(f"{prefix}.ln2.weight", d, 1.0)
        vector(f"{prefix}.ln2.bias", d, 0.0)
        weight(f"{prefix}.ffn.fc1.weight", d, dff, (d, dff), layer_rng.child(4))
        vector(f"{prefix}.ffn.fc1.bias", dff, 0.0)
        weight(f"{prefix}.ffn.fc2.weight", dff, d, (dff, d), layer_rng.child(5))
        vector(f"{prefix}.ffn.fc2.bias", d, 0.0)
    vector("final_ln.weight", d, 1.0)
    vector("final_ln.bias", d, 0.0)


def init_head_params(
    cfg: EncoderConfig, store: ParamStore, rng: SplitRng, dtype=np.float32,
    trainable: bool = True, zero_init: bool = False,
) -> None:
    d = cfg.model_dim
    if zero_init:
        w = np.zeros((d, 2), dtype=dtype)
    else:
        w = xavier_uniform(rng.generator(), d, 2, (d, 2), dtype)
    store.register("head.weight", Tensor(w), trainable=trainable, group="head")
    store.register("head.bias", Tensor(np.zeros(2, dtype=dtype)), trainable=trainable, group="head")


def sinusoidal_positions(num_frames: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic fixed sin/cos position table [T, D]."""
    pos = np.arange(num_frames, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(idx / 2.0)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# -- forward pieces ------------------------------------------------------


def _ln(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    y = T.layer_norm(x)
    return T.add(T.mul(y, store[f"{prefix}.weight"]), store[f"{prefix}.bias"])


def mhsa(cfg: EncoderConfig, store: ParamStore, x: Tensor, layer: int, bank) -> Tensor:
    """Scaled dot-product multi-head self-attention, no mask.

    Projections route through the adapter bank so LoRA deltas can attach.
    """
    b, t, d = x.shape
    h, dh = cfg.num_heads, cfg.head_dim

    def heads(z: Tensor) -> Tensor:
        return T.transpose(T.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

    q = heads(bank.project(layer, "q", x, store))
    k = heads(bank.project(layer, "k", x, store))
    v = heads(bank.project(layer, "v", x, store))

    # scale q rather than the T x T score matrix: same math, smaller array
    scores = T.matmul(T.scale(q, 1.0 / math.sqrt(dh)), T.transpose(k, (0, 1, 3, 2)))
    attn = T.softmax(scores)
    ctx = T.matmul(attn, v)  # [B, H, T, dh]
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return bank.project(layer, "out", merged, store)


def ffn(store: ParamStore, x: Tensor, layer: int) -> Tensor:
    prefix = f"layers.{layer}.ffn"
    hidden = T.gelu(T.add(T.matmul(x, store[f"{prefix}.fc1.weight"]), store[f"{prefix}.fc1.bias"]))
    return T.add(T.matmul(hidden, store[f"{prefix}.fc2.weight"]), store[f"{prefix}.fc2.bias"])


def encoder_forward(cfg: EncoderConfig, store: ParamStore, x: Tensor, bank) -> tuple[Tensor, int]:
    """Full encoder pass. Returns (hidden [B, T', D], pool_start).

    ``pool_start`` is the time index the classifier should pool from;
    it is nonzero when trainable prompt tokens were prepended.
    """
    if x.ndim != 3:
        raise ModelConfigError(f"encoder input must be [B, T, F], got {x.shape}")
    b, t, f = x.shape
    if f != cfg.feature_dim:
        raise ModelConfigError(f"input feature dim {f} != configured {cfg.feature_dim}")
    if t > cfg.max_seq_len:
        raise ModelConfigError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if bank.num_layers != cfg.num_layers:
        raise ModelConfigError(
            f"adapter bank has {bank.num_layers} layers, encoder has {cfg.num_layers}"
        )

    h = T.add(T.matmul(x, store["input_proj.weight"]), store["input_proj.bias"])
    if cfg.positions == "sinusoidal":
        h = T.add(h, Tensor(sinusoidal_positions(t, cfg.model_dim, h.dtype)))
    h, pool_start = bank.prepend_prompt(h, store)

    for i in range(cfg.num_layers):
        if cfg.pre_norm:
            a = mhsa(cfg, store, _ln(store, f"layers.{i}.ln1", h), i, bank)
            h = T.add(h, a)
            branch = bank.mhsa_branch(i, a, store)
            if branch is not None:
                h = T.add(h, branch)
            ff = ffn(store, _ln(store, f"layers.{i}.ln2", h), i)
            h = T.add(h, ff)
            branch = bank.ffn_branch(i, ff, store)
            if branch is not None:
                h = T.add(h, branch)
        else:
            a = mhsa(cfg, store, h, i, bank)
            s = T.add(h, a)
            branch = bank.mhsa_branch(i, a, store)
            if branch is not None:
                s = T.add(s, branch)
            h = _ln(store, f"layers.{i}.ln1", s)
            ff = ffn(store, h, i)
            s = T.add(h, ff)
            branch = bank.ffn_branch(i, ff, store)
            if branch is not None:
                s = T.add(s, branch)
            h = _ln(store, f"layers.{i}.ln2", s)

    if cfg.pre_norm:
        h = _ln(store, "final_ln", h)
    return h, pool_start


def classify(store: ParamStore, hidden: Tensor, pool_start: int = 0) -> Tensor:
    """Mean-pool over (original) time, then affine map to 2 logits.

    Column 0 is the spoof logit, column 1 the bonafide logit; the
    detection score is their difference.
    """
    if pool_start:
        _, tail = T.split(hidden, [pool_start, hidden.shape[1] - pool_start], axis=1)
    else:
        tail = hidden
    pooled = T.mean(tail, axis=1)
    return T.add(T.matmul(pooled, store["head.weight"]), store["head.bias"])


def scores_from_logits(logits: np.ndarray) -> np.ndarray:
    """Bonafide-minus-spoof detection score per row."""
    return logits[:, 1] - logits[:, 0]
