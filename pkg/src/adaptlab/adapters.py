"""PEFT methods: the multi-scale convolutional adapter and baselines.

The main adapter is a bottleneck that reads the sublayer output,
projects it down, runs parallel depthwise 1-d convolutions with distinct
kernel sizes (small kernels catch short bursts, large kernels catch slow
distortions), fuses the branches, and projects back up through a
zero-initialized matrix so the whole module is exactly transparent at
initialization.

Fusion modes:

* ``mixup_conv`` (default): branches see disjoint channel groups; the
  concatenated result passes through a residual depthwise conv of
  kernel 3 that exchanges information across scales.
* ``concat``: the same channel-split wiring without the fusion conv.
* ``sum`` / ``weighted_sum``: every branch convolves the full bottleneck
  width and the outputs are added (optionally with learnable scalar
  weights, initialized 1/N, unnormalized).

An empty kernel list selects the pure bottleneck (down -> GELU -> up),
i.e. a bias-free Houlsby-style adapter on the same site.

Baselines: Houlsby bottlenecks on both sites, LoRA on all four attention
projections, BitFit bias marking, and trainable prompt tokens. All
variants except Prompt are exactly transparent at initialization.

Everything here is bias-free unless stated otherwise; that keeps the
closed-form parameter counts in :mod:`adaptlab.audit` exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore
from .rng import SplitRng
from .tensor import Tensor

VARIANTS = ("multiconv", "houlsby", "lora", "bitfit", "prompt", "none")
FUSIONS = ("mixup_conv", "sum", "weighted_sum", "concat")
PLACEMENTS = ("mhsa", "ffn", "both")

MIXUP_KERNEL = 3


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "multiconv"
    kernels: tuple[int, ...] = (3, 7, 15, 23)
    bottleneck: int = 64
    fusion: str = "mixup_conv"
    placement: str = "mhsa"
    rank: int = 16
    prompt_tokens: int = 30

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if self.variant not in VARIANTS:
            raise AdapterConfigError(f"unknown variant {self.variant!r}; have {VARIANTS}")
        if self.fusion not in FUSIONS:
            raise AdapterConfigError(f"unknown fusion {self.fusion!r}; have {FUSIONS}")
        if self.placement not in PLACEMENTS:
            raise AdapterConfigError(f"unknown placement {self.placement!r}; have {PLACEMENTS}")
        for k in self.kernels:
            if k < 1 or k % 2 == 0:
                raise AdapterConfigError(f"kernel sizes must be odd and >= 1, got {k}")
        if self.bottleneck < 1:
            raise AdapterConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.variant == "multiconv" and self.kernels and self.fusion in ("mixup_conv", "concat"):
            n = len(self.kernels)
            if self.bottleneck % n != 0:
                raise AdapterConfigError(
                    f"bottleneck {self.bottleneck} not divisible by {n} branches; "
                    "channel-split fusions reject remainders rather than pad them"
                )
        if self.rank < 1:
            raise AdapterConfigError(f"rank must be >= 1, got {self.rank}")
        if self.prompt_tokens < 0:
            raise AdapterConfigError(f"prompt_tokens must be >= 0, got {self.prompt_tokens}")

    @property
    def num_branches(self) -> int:
        return len(self.kernels)

    def sites(self) -> tuple[str, ...]:
        """Placement sites that carry an adapter module."""
        if self.variant == "houlsby":
            return ("mhsa", "ffn")  # Houlsby always adapts both sublayers
        if self.variant == "multiconv":
            return ("mhsa", "ffn") if self.placement == "both" else (self.placement,)
        return ()


# -- building ------------------------------------------------------------


def _conv_init(gen: np.random.Generator, channels: int, k: int, dtype) -> np.ndarray:
    # wider than the usual 1/sqrt(k): branch outputs feed a zero-initialized
    # up-projection, and unit-scale branches bootstrap its gradient faster
    limit = 3.0 / math.sqrt(k)
    return gen.uniform(-limit, limit, size=(channels, k)).astype(dtype)


def build_adapter_bank(
    num_layers: int,
    model_dim: int,
    acfg: AdapterConfig,
    store: ParamStore,
    rng: SplitRng,
    dtype=np.float32,
    trainable: bool = True,
    zero_init: bool = False,
) -> "AdapterBank":
    """Register adapter parameters for every layer and return the bank.

    Backbone parameters must already be in the store (BitFit flips their
    flags; LoRA shadows the attention projections).
    """
    from .encoder import xavier_uniform  # shared init helper

    d, dp = model_dim, acfg.bottleneck

    def reg(name: str, data: np.ndarray) -> None:
        store.register(name, Tensor(data), trainable=trainable, group="adapter")

    if acfg.variant == "multiconv":
        for i in range(num_layers):
            lrng = rng.child(i)
            for s, site in enumerate(acfg.sites()):
                srng = lrng.child(s)
                prefix = f"layers.{i}.adapter_{site}"
                gen = srng.generator()
                down = (np.zeros((d, dp), dtype=dtype) if zero_init
                        else xavier_uniform(gen, d, dp, (d, dp), dtype))
                reg(f"{prefix}.down", down)
                if acfg.kernels:
                    per_branch = (dp // acfg.num_branches
                                  if acfg.fusion in ("mixup_conv", "concat") else dp)
                    for j, k in enumerate(acfg.kernels):
                        w = (np.zeros((per_branch, k), dtype=dtype) if zero_init
                             else _conv_init(srng.child(10 + j).generator(), per_branch, k, dtype))
                        reg(f"{prefix}.branch{j}.kernel", w)
                    if acfg.fusion == "mixup_conv":
                        w = (np.zeros((dp, MIXUP_KERNEL), dtype=dtype) if zero_init
                             else _conv_init(srng.child(50).generator(), dp, MIXUP_KERNEL, dtype))
                        reg(f"{prefix}.mix", w)
                    elif acfg.fusion == "weighted_sum":
                        alphas = np.full(acfg.num_branches, 1.0 / acfg.num_branches, dtype=dtype)
                        reg(f"{prefix}.alphas", alphas)
                reg(f"{prefix}.up", np.zeros((dp, d), dtype=dtype))

    elif acfg.variant == "houlsby":
        for i in range(num_layers):
            lrng = rng.child(i)
            for s, site in enumerate(acfg.sites()):
                gen = lrng.child(s).generator()
                prefix = f"layers.{i}.adapter_{site}"
                reg(f"{prefix}.ln.weight", np.ones(d, dtype=dtype))
                reg(f"{prefix}.ln.bias", np.zeros(d, dtype=dtype))
                down = (np.zeros((d, dp), dtype=dtype) if zero_init
                        else xavier_uniform(gen, d, dp, (d, dp), dtype))
                reg(f"{prefix}.down.weight", down)
                reg(f"{prefix}.down.bias", np.zeros(dp, dtype=dtype))
                reg(f"{prefix}.up.weight", np.zeros((dp, d), dtype=dtype))
                reg(f"{prefix}.up.bias", np.zeros(d, dtype=dtype))

    elif acfg.variant == "lora":
        if acfg.rank >= d:
            raise AdapterConfigError(
                f"LoRA rank {acfg.rank} must be < projection dim {d} to be low-rank"
            )
        for i in range(num_layers):
            lrng = rng.child(i)
            for j, proj in enumerate(("q", "k", "v", "out")):
                gen = lrng.child(j).generator()
                a = (np.zeros((d, acfg.rank), dtype=dtype) if zero_init
                     else (0.02 * gen.standard_normal((d, acfg.rank))).astype(dtype))
                store.register(f"layers.{i}.attn.{proj}.lora_a", Tensor(a),
                               trainable=trainable, group="adapter")
                store.register(f"layers.{i}.attn.{proj}.lora_b",
                               Tensor(np.zeros((acfg.rank, d), dtype=dtype)),
                               trainable=trainable, group="adapter")

    elif acfg.variant == "prompt":
        gen = rng.generator()
        tokens = (np.zeros((acfg.prompt_tokens, d), dtype=dtype) if zero_init
                  else (0.02 * gen.standard_normal((acfg.prompt_tokens, d))).astype(dtype))
        store.register("prompt.tokens", Tensor(tokens), trainable=trainable, group="adapter")

    elif acfg.variant == "bitfit":
        if trainable:
            bitfit_mark(store, num_layers)

    return AdapterBank(acfg, num_layers, model_dim)


def bitfit_mark(store: ParamStore, num_layers: int) -> list[str]:
    """Mark exactly the per-block bias vectors trainable; everything else stays put.

    Covers q/k/v/out, both FFN layers, and both LayerNorms in each block.
    The input projection, final LayerNorm, and head are untouched.
    """
    marked = []
    for i in range(num_layers):
        for name in (
            [f"layers.{i}.attn.{p}.bias" for p in ("q", "k", "v", "out")]
            + [f"layers.{i}.ffn.fc1.bias", f"layers.{i}.ffn.fc2.bias"]
            + [f"layers.{i}.ln1.bias", f"layers.{i}.ln2.bias"]
        ):
            store.set_trainable(name, True)
            marked.append(name)
    return marked


# -- forwards ------------------------------------------------------------


def mixup_fuse(h: Tensor, mix_kernel: Tensor) -> Tensor:
    """Residual depthwise conv (kernel 3) exchanging info across channels' scales.

    h: [B, D', T]. A zero kernel makes this the identity.
    """
    return T.add(h, T.depthwise_conv1d(h, mix_kernel))


def aggregate(heads: list[Tensor], mode: str, alphas: Tensor | None = None) -> Tensor:
    """Combine branch outputs: Sum, WeightedSum (learnable scalars), or Concat."""
    if mode == "concat":
        return T.concat(heads, axis=1) if len(heads) > 1 else heads[0]
    if mode == "sum":
        out = heads[0]
        for head in heads[1:]:
            out = T.add(out, head)
        return out
    if mode == "weighted_sum":
        weights = T.split(alphas, [1] * len(heads), axis=0)
        out = T.mul(heads[0], weights[0])
        for head, w in zip(heads[1:], weights[1:]):
            out = T.add(out, T.mul(head, w))
        return out
    raise AdapterConfigError(f"aggregate cannot handle mode {mode!r}")


def multiconv_forward(a: Tensor, store: ParamStore, prefix: str, acfg: AdapterConfig) -> Tensor:
    """Bottleneck -> parallel multi-scale depthwise convs -> fusion -> up.

    Returns the branch output; the caller adds it into the residual
    stream. With the up-projection at its zero init this is exactly the
    zero tensor.
    """
    hp = T.matmul(a, store[f"{prefix}.down"])  # [B, T, D']
    if not acfg.kernels:
        z = T.gelu(hp)
    else:
        hpt = T.transpose(hp, (0, 2, 1))  # [B, D', T]
        if acfg.fusion in ("mixup_conv", "concat"):
            per = acfg.bottleneck // acfg.num_branches
            groups = T.split(hpt, [per] * acfg.num_branches, axis=1)
            heads = [
                T.gelu(T.depthwise_conv1d(g, store[f"{prefix}.branch{j}.kernel"]))
                for j, g in enumerate(groups)
            ]
            merged = T.concat(heads, axis=1) if len(heads) > 1 else heads[0]
            if acfg.fusion == "mixup_conv":
                merged = mixup_fuse(merged, store[f"{prefix}.mix"])
        else:
            heads = [
                T.gelu(T.depthwise_conv1d(hpt, store[f"{prefix}.branch{j}.kernel"]))
                for j in range(acfg.num_branches)
            ]
            alphas = store[f"{prefix}.alphas"] if acfg.fusion == "weighted_sum" else None
            merged = aggregate(heads, acfg.fusion, alphas)
        z = T.transpose(merged, (0, 2, 1))
    return T.matmul(z, store[f"{prefix}.up"])


def houlsby_forward(a: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """LN -> down+bias -> GELU -> up+bias, up zero-initialized."""
    y = T.layer_norm(a)
    y = T.add(T.mul(y, store[f"{prefix}.ln.weight"]), store[f"{prefix}.ln.bias"])
    y = T.gelu(T.add(T.matmul(y, store[f"{prefix}.down.weight"]), store[f"{prefix}.down.bias"]))
    return T.add(T.matmul(y, store[f"{prefix}.up.weight"]), store[f"{prefix}.up.bias"])


def lora_delta(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Low-rank update x @ A @ B (scaling factor 1)."""
    return T.matmul(T.matmul(x, a), b)


@dataclass
class AdapterBank:
    """Per-layer adapter hooks the encoder calls at fixed sites."""

    cfg: AdapterConfig
    num_layers: int
    model_dim: int

    def project(self, layer: int, proj: str, x: Tensor, store: ParamStore) -> Tensor:
        """Attention projection, with the LoRA delta attached when configured."""
        base = f"layers.{layer}.attn.{proj}"
        y = T.add(T.matmul(x, store[f"{base}.weight"]), store[f"{base}.bias"])
        if self.cfg.variant == "lora":
            y = T.add(y, lora_delta(x, store[f"{base}.lora_a"], store[f"{base}.lora_b"]))
        return y

    def _branch(self, layer: int, site: str, sub_out: Tensor, store: ParamStore) -> Tensor | None:
        if site not in self.cfg.sites():
            return None
        prefix = f"layers.{layer}.adapter_{site}"
        if self.cfg.variant == "multiconv":
            return multiconv_forward(sub_out, store, prefix, self.cfg)
        if self.cfg.variant == "houlsby":
            return houlsby_forward(sub_out, store, prefix)
        return None

    def mhsa_branch(self, layer: int, attn_out: Tensor, store: ParamStore) -> Tensor | None:
        return self._branch(layer, "mhsa", attn_out, store)

    def ffn_branch(self, layer: int, ffn_out: Tensor, store: ParamStore) -> Tensor | None:
        return self._branch(layer, "ffn", ffn_out, store)

    def prepend_prompt(self, h: Tensor, store: ParamStore) -> tuple[Tensor, int]:
        if self.cfg.variant != "prompt" or self.cfg.prompt_tokens == 0:
            return h, 0
        tokens = store["prompt.tokens"]
        p = tokens.shape[0]
        ones = Tensor(np.ones((h.shape[0], 1, 1), dtype=h.dtype))
        tiled = T.mul(ones, T.reshape(tokens, (1, p, tokens.shape[1])))
        return T.concat([tiled, h], axis=1), p


def gradcheck_adapter_cases():
    """Finite-difference cases covering every adapter variant on tiny dims.

    Up-projections / LoRA B are randomized away from their zero init so
    the full backward path is exercised, not just the trivial zero point.
    """
    from .gradcheck import GradCheckCase

    def multiconv_case(fusion: str, kernels: tuple[int, ...]):
        def build(gen: np.random.Generator):
            acfg = AdapterConfig(variant="multiconv", kernels=kernels,
                                 bottleneck=4, fusion=fusion)
            store = ParamStore()
            rng = SplitRng(int(gen.integers(0, 2**63)))
            build_adapter_bank(1, 6, acfg, store, rng, dtype=np.float64)
            prefix = "layers.0.adapter_mhsa"
            store[f"{prefix}.up"].data = gen.standard_normal((4, 6))
            x = T.Tensor(gen.standard_normal((2, 5, 6)), requires_grad=True, dtype=np.float64)
            tensors = [x] + [store[n] for n in store.names()]

            def forward(x, *_):
                return multiconv_forward(x, store, prefix, acfg)

            return tensors, forward

        return build

    def houlsby_case(gen: np.random.Generator):
        store = ParamStore()
        rng = SplitRng(int(gen.integers(0, 2**63)))
        acfg = AdapterConfig(variant="houlsby", bottleneck=3)
        build_adapter_bank(1, 6, acfg, store, rng, dtype=np.float64)
        prefix = "layers.0.adapter_mhsa"
        store[f"{prefix}.up.weight"].data = gen.standard_normal((3, 6))
        store[f"{prefix}.up.bias"].data = gen.standard_normal(6)
        x = T.Tensor(gen.standard_normal((2, 4, 6)), requires_grad=True, dtype=np.float64)
        tensors = [x] + [store[n] for n in store.names() if n.startswith(prefix)]

        def forward(x, *_):
            return houlsby_forward(x, store, prefix)

        return tensors, forward

    def lora_case(gen: np.random.Generator):
        x = T.Tensor(gen.standard_normal((2, 4, 6)), requires_grad=True, dtype=np.float64)
        a = T.Tensor(gen.standard_normal((6, 2)), requires_grad=True, dtype=np.float64)
        b = T.Tensor(gen.standard_normal((2, 6)), requires_grad=True, dtype=np.float64)
        return [x, a, b], lora_delta

    def prompt_case(gen: np.random.Generator):
        h = T.Tensor(gen.standard_normal((2, 3, 4)), requires_grad=True, dtype=np.float64)
        tokens = T.Tensor(gen.standard_normal((2, 4)), requires_grad=True, dtype=np.float64)

        def forward(h, tokens):
            ones = T.Tensor(np.ones((h.shape[0], 1, 1)))
            tiled = T.mul(ones, T.reshape(tokens, (1, 2, 4)))
            return T.concat([tiled, h], axis=1)

        return [h, tokens], forward

    return [
        GradCheckCase("adapter_multiconv_mixup", multiconv_case("mixup_conv", (1, 3))),
        GradCheckCase("adapter_multiconv_concat", multiconv_case("concat", (1, 3))),
        GradCheckCase("adapter_multiconv_sum", multiconv_case("sum", (3, 5))),
        GradCheckCase("adapter_multiconv_weighted", multiconv_case("weighted_sum", (3, 5))),
        GradCheckCase("adapter_multiconv_bottleneck_only", multiconv_case("mixup_conv", ())),
        GradCheckCase("adapter_houlsby", houlsby_case),
        GradCheckCase("adapter_lora", lora_case),
        GradCheckCase("adapter_prompt", prompt_case),
    ]
