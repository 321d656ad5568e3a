"""Encoder contracts: shapes, oracles, transparency, gradient hygiene."""

import numpy as np
import pytest

from adaptlab import tensor as T
from adaptlab.adapters import AdapterConfig
from adaptlab.encoder import (
    EncoderConfig,
    ModelConfigError,
    classify,
    encoder_forward,
    encoder_preset,
    mhsa,
    sinusoidal_positions,
)
from adaptlab.model import build_model
from adaptlab.tensor import Tensor


def naive_mhsa(store, x: np.ndarray, num_heads: int, layer: int = 0) -> np.ndarray:
    """Per-head python-loop attention oracle (no batching tricks)."""
    b, t, d = x.shape
    dh = d // num_heads
    prefix = f"layers.{layer}.attn"
    wq, bq = store[f"{prefix}.q.weight"].data, store[f"{prefix}.q.bias"].data
    wk, bk = store[f"{prefix}.k.weight"].data, store[f"{prefix}.k.bias"].data
    wv, bv = store[f"{prefix}.v.weight"].data, store[f"{prefix}.v.bias"].data
    wo, bo = store[f"{prefix}.out.weight"].data, store[f"{prefix}.out.bias"].data
    out = np.zeros_like(x)
    for bi in range(b):
        q = x[bi] @ wq + bq
        k = x[bi] @ wk + bk
        v = x[bi] @ wv + bv
        merged = np.zeros((t, d))
        for h in range(num_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
            weights /= weights.sum(axis=-1, keepdims=True)
            assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
            merged[:, sl] = weights @ v[:, sl]
        out[bi] = merged @ wo + bo
    return out


def null_bank_model(cfg: EncoderConfig, seed: int = 3, dtype=np.float64):
    return build_model(cfg, AdapterConfig(variant="none"), seed=seed, mode="peft", dtype=dtype)


class TestMhsa:
    def test_matches_per_head_loop_oracle(self, gen):
        cfg = EncoderConfig(num_layers=1, model_dim=8, inner_dim=16, num_heads=2,
                            feature_dim=4, max_seq_len=16)
        model = null_bank_model(cfg)
        x = gen.standard_normal((1, 4, 8))
        got = mhsa(cfg, model.store, Tensor(x), 0, model.bank).data
        np.testing.assert_allclose(got, naive_mhsa(model.store, x, 2), atol=1e-5)

    def test_single_token_attention_is_identity_weight(self, gen):
        cfg = EncoderConfig(num_layers=1, model_dim=8, inner_dim=16, num_heads=2,
                            feature_dim=4, max_seq_len=16)
        model = null_bank_model(cfg)
        x = gen.standard_normal((2, 1, 8))
        got = mhsa(cfg, model.store, Tensor(x), 0, model.bank).data
        store = model.store
        v = x @ store["layers.0.attn.v.weight"].data + store["layers.0.attn.v.bias"].data
        want = v @ store["layers.0.attn.out.weight"].data + store["layers.0.attn.out.bias"].data
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestEncoderForward:
    @pytest.mark.parametrize("batch,frames", [(1, 5), (2, 5), (1, 50), (2, 50)])
    def test_output_shape(self, gen, batch, frames):
        cfg = EncoderConfig(num_layers=2, model_dim=16, inner_dim=32, num_heads=2,
                            feature_dim=6, max_seq_len=64)
        model = null_bank_model(cfg)
        x = Tensor(gen.standard_normal((batch, frames, 6)))
        hidden, pool_start = encoder_forward(cfg, model.store, x, model.bank)
        assert hidden.shape == (batch, frames, 16)
        assert pool_start == 0

    def test_residual_only_path_with_zeroed_sublayers(self, gen):
        cfg = EncoderConfig(num_layers=2, model_dim=16, inner_dim=32, num_heads=2,
                            feature_dim=6, max_seq_len=64)
        model = null_bank_model(cfg)
        for i in range(cfg.num_layers):
            model.store[f"layers.{i}.attn.out.weight"].data[:] = 0.0
            model.store[f"layers.{i}.ffn.fc2.weight"].data[:] = 0.0
        x = gen.standard_normal((2, 7, 6))
        hidden, _ = encoder_forward(cfg, model.store, Tensor(x), model.bank)

        proj = x @ model.store["input_proj.weight"].data + model.store["input_proj.bias"].data
        proj = proj + sinusoidal_positions(7, 16, np.float64)
        mu = proj.mean(-1, keepdims=True)
        var = ((proj - mu) ** 2).mean(-1, keepdims=True)
        want = (proj - mu) / np.sqrt(var + 1e-5)
        np.testing.assert_allclose(hidden.data, want, atol=1e-10)

    def test_sequence_too_long_rejected(self, gen):
        cfg = EncoderConfig(num_layers=1, model_dim=8, inner_dim=16, num_heads=2,
                            feature_dim=3, max_seq_len=4)
        model = null_bank_model(cfg)
        with pytest.raises(ModelConfigError, match="max_seq_len"):
            encoder_forward(cfg, model.store, Tensor(gen.standard_normal((1, 9, 3))), model.bank)

    def test_layer_count_mismatch_rejected(self, gen):
        cfg = EncoderConfig(num_layers=2, model_dim=8, inner_dim=16, num_heads=2,
                            feature_dim=3, max_seq_len=16)
        model = null_bank_model(cfg)
        model.bank.num_layers = 5
        with pytest.raises(ModelConfigError, match="layers"):
            encoder_forward(cfg, model.store, Tensor(gen.standard_normal((1, 4, 3))), model.bank)

    def test_permutation_equivariance_without_positions(self, gen):
        cfg = EncoderConfig(num_layers=2, model_dim=16, inner_dim=32, num_heads=2,
                            feature_dim=6, max_seq_len=64, positions="none")
        model = null_bank_model(cfg)
        x = gen.standard_normal((1, 9, 6))
        perm = gen.permutation(9)
        base, _ = encoder_forward(cfg, model.store, Tensor(x), model.bank)
        shuffled, _ = encoder_forward(cfg, model.store, Tensor(x[:, perm]), model.bank)
        np.testing.assert_allclose(shuffled.data, base.data[:, perm], atol=1e-8)

    def test_post_norm_variant_runs(self, gen):
        cfg = EncoderConfig(num_layers=1, model_dim=8, inner_dim=16, num_heads=2,
                            feature_dim=3, max_seq_len=16, pre_norm=False)
        model = null_bank_model(cfg)
        hidden, _ = encoder_forward(cfg, model.store, Tensor(gen.standard_normal((1, 5, 3))), model.bank)
        assert hidden.shape == (1, 5, 8)


class TestClassify:
    def _model(self):
        cfg = EncoderConfig(num_layers=1, model_dim=6, inner_dim=8, num_heads=2,
                            feature_dim=3, max_seq_len=16)
        return null_bank_model(cfg)

    def test_constant_frames_pool_to_that_frame(self, gen):
        model = self._model()
        frame = gen.standard_normal(6)
        h = np.tile(frame, (2, 7, 1))
        got = classify(model.store, Tensor(h)).data
        want = frame @ model.store["head.weight"].data + model.store["head.bias"].data
        np.testing.assert_allclose(got, np.tile(want, (2, 1)), atol=1e-9)

    def test_zero_weights_bias_only(self, gen):
        model = self._model()
        model.store["head.weight"].data[:] = 0.0
        model.store["head.bias"].data = np.array([0.3, -0.3])
        got = classify(model.store, Tensor(gen.standard_normal((3, 5, 6)))).data
        np.testing.assert_allclose(got, np.tile([0.3, -0.3], (3, 1)), atol=1e-12)

    def test_score_monotone_in_bonafide_logit(self):
        from adaptlab.encoder import scores_from_logits
        logits = np.array([[0.5, 0.1], [0.5, 0.7], [0.5, 2.0]])
        scores = scores_from_logits(logits)
        assert scores[0] < scores[1] < scores[2]


class TestGradientHygiene:
    def test_frozen_backbone_gets_no_grads_adapter_does(self, gen, tiny_encoder):
        acfg = AdapterConfig(variant="multiconv", kernels=(3,), bottleneck=4)
        model = build_model(tiny_encoder, acfg, seed=0, mode="peft", dtype=np.float64)
        x = Tensor(gen.standard_normal((2, 6, 5)))
        loss = T.mean(model.forward(x))
        T.backward(loss)
        for name, entry in model.store.items():
            if entry.group == "backbone":
                assert entry.tensor.grad is None or not entry.tensor.grad.any(), name
            elif entry.group == "adapter":
                assert entry.tensor.grad is not None, name

    def test_full_tune_backbone_gets_grads(self, gen, tiny_encoder):
        model = build_model(tiny_encoder, AdapterConfig(variant="none"),
                            seed=0, mode="full_tune", dtype=np.float64)
        x = Tensor(gen.standard_normal((1, 4, 5)))
        T.backward(T.mean(model.forward(x)))
        assert model.store["layers.0.attn.q.weight"].grad is not None


class TestEncoderGradients:
    def test_finite_difference_on_tiny_config(self, gen):
        """Full-model FD on L=1, D=8, H=2, T=4 over a random parameter subset."""
        cfg = EncoderConfig(num_layers=1, model_dim=8, inner_dim=12, num_heads=2,
                            feature_dim=4, max_seq_len=8)
        model = build_model(cfg, AdapterConfig(variant="multiconv", kernels=(3,), bottleneck=4),
                            seed=5, mode="full_tune", dtype=np.float64)
        # give the zero-init up-projection a value so gradients flow everywhere
        model.store["layers.0.adapter_mhsa.up"].data = 0.3 * gen.standard_normal((4, 8))
        x = Tensor(gen.standard_normal((1, 4, 4)), requires_grad=True)
        projector = gen.standard_normal((1, 4, 8))

        def loss_value() -> float:
            hidden, _ = encoder_forward(cfg, model.store, x, model.bank)
            return T.tsum(T.mul(hidden, Tensor(projector))).item()

        hidden, _ = encoder_forward(cfg, model.store, x, model.bank)
        T.backward(T.tsum(T.mul(hidden, Tensor(projector))))

        eps = 1e-5
        checked = 0
        names = ["input_proj.weight", "layers.0.attn.q.weight", "layers.0.attn.out.bias",
                 "layers.0.ffn.fc1.weight", "layers.0.ln1.weight", "final_ln.bias",
                 "layers.0.adapter_mhsa.down", "layers.0.adapter_mhsa.branch0.kernel",
                 "layers.0.adapter_mhsa.up"]
        with T.no_grad():
            for name in names:
                tensor = model.store[name]
                flat = tensor.data.reshape(-1)
                grad = tensor.grad.reshape(-1)
                for idx in gen.choice(flat.size, size=min(4, flat.size), replace=False):
                    orig = flat[idx]
                    flat[idx] = orig + eps
                    hi = loss_value()
                    flat[idx] = orig - eps
                    lo = loss_value()
                    flat[idx] = orig
                    numeric = (hi - lo) / (2 * eps)
                    denom = max(1.0, abs(numeric), abs(grad[idx]))
                    assert abs(grad[idx] - numeric) / denom < 1e-4, name
                    checked += 1
        assert checked >= 30
