"""Optimizer recurrences, training-loop contracts, ablation harness."""

import math

import numpy as np
import pytest

from adaptlab import tensor as T
from adaptlab.adapters import AdapterConfig
from adaptlab.data import CorpusSpec, generate
from adaptlab.encoder import EncoderConfig
from adaptlab.model import build_model
from adaptlab.params import ParamStore
from adaptlab.tensor import Tensor
from adaptlab.training import (
    AdamState,
    NonFiniteLossError,
    TrainConfig,
    TrainConfigError,
    adam_step,
    ablation_csv,
    default_grid,
    run_ablation,
    scores_csv,
    score_corpus,
    split_corpus,
    train,
    train_log_csv,
)

ENC = EncoderConfig(num_layers=1, model_dim=16, inner_dim=24, num_heads=2,
                    feature_dim=6, max_seq_len=70)
FAST = TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=0)


def tiny_model(seed=0, mode="peft", variant="multiconv"):
    acfg = AdapterConfig(variant=variant, kernels=(3,), bottleneck=4)
    return build_model(ENC, acfg, seed=seed, mode=mode)


class TestConfigValidation:
    def test_beta_bounds(self):
        with pytest.raises(TrainConfigError, match="betas"):
            TrainConfig(beta1=1.0)

    def test_lr_positive(self):
        with pytest.raises(TrainConfigError, match="lr"):
            TrainConfig(lr=0.0)

    def test_mode_checked(self):
        with pytest.raises(TrainConfigError, match="mode"):
            TrainConfig(mode="sideways")


class TestAdam:
    def test_zero_grad_zero_decay_leaves_params(self):
        store = ParamStore()
        store.register("w", Tensor(np.array([1.0, -2.0])), trainable=True)
        store["w"].grad = np.zeros(2)
        cfg = TrainConfig(lr=0.1, weight_decay=0.0)
        adam_step(store, AdamState(), cfg)
        np.testing.assert_array_equal(store["w"].data, [1.0, -2.0])

    def test_hand_evaluated_first_step(self):
        # theta=1, g=1, lr=0.1: m_hat=1, v_hat=1 -> theta = 1 - 0.1/(1+eps)
        store = ParamStore()
        store.register("w", Tensor(np.array([1.0])), trainable=True)
        store["w"].grad = np.array([1.0])
        cfg = TrainConfig(lr=0.1, weight_decay=0.0)
        adam_step(store, AdamState(), cfg)
        expected = 1.0 - 0.1 * 1.0 / (1.0 + cfg.eps)
        assert store["w"].data[0] == pytest.approx(expected, abs=1e-12)
        assert store["w"].data[0] == pytest.approx(0.9, abs=1e-7)

    def test_second_step_recurrences(self):
        store = ParamStore()
        store.register("w", Tensor(np.array([1.0])), trainable=True)
        cfg = TrainConfig(lr=0.1, weight_decay=0.0)
        state = AdamState()
        # hand-rolled two steps with g=1 then g=2
        theta, m, v = 1.0, 0.0, 0.0
        for step, g in enumerate((1.0, 2.0), start=1):
            store["w"].grad = np.array([g])
            adam_step(store, state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**step)
            v_hat = v / (1 - 0.999**step)
            theta -= 0.1 * m_hat / (math.sqrt(v_hat) + cfg.eps)
            assert store["w"].data[0] == pytest.approx(theta, abs=1e-12)

    def test_decoupled_decay_applied_before_update(self):
        store = ParamStore()
        store.register("w", Tensor(np.array([2.0])), trainable=True)
        store["w"].grad = np.array([0.0])
        cfg = TrainConfig(lr=0.1, weight_decay=0.5)
        adam_step(store, AdamState(), cfg)
        # zero gradient: the only movement is the multiplicative decay
        assert store["w"].data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-12)

    def test_frozen_params_untouched(self):
        store = ParamStore()
        store.register("frozen", Tensor(np.array([3.0])), trainable=False)
        store["frozen"].grad = np.array([5.0])  # even with a grad present
        adam_step(store, AdamState(), TrainConfig(lr=0.5))
        assert store["frozen"].data[0] == 3.0

    def test_missing_grads_skipped_and_reported(self):
        store = ParamStore()
        store.register("a", Tensor(np.array([1.0])), trainable=True)
        store.register("b", Tensor(np.array([1.0])), trainable=True)
        store["a"].grad = np.array([1.0])
        report = adam_step(store, AdamState(), TrainConfig(lr=0.1))
        assert report.updated == 1
        assert report.skipped == ("b",)


class TestSplit:
    def test_split_is_deterministic_and_order_free(self, small_corpus):
        train_a, dev_a = split_corpus(small_corpus)
        reversed_corpus = type(small_corpus)(
            list(reversed(small_corpus.records)), small_corpus.frames, small_corpus.features
        )
        train_b, dev_b = split_corpus(reversed_corpus)
        ids_a = {small_corpus.records[i].id for i in dev_a}
        ids_b = {reversed_corpus.records[i].id for i in dev_b}
        assert ids_a == ids_b

    def test_split_fractions_reasonable(self, small_corpus):
        train_idx, dev_idx = split_corpus(small_corpus)
        assert len(train_idx) + len(dev_idx) == len(small_corpus)
        assert 0.08 < len(dev_idx) / len(small_corpus) < 0.35


class TestTrainLoop:
    def test_frozen_only_loss_constant_across_epochs(self, small_corpus):
        model = tiny_model(mode="frozen_only", variant="none")
        cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=16, seed=1, mode="frozen_only")
        result = train(model, small_corpus, cfg)
        losses = [row.train_loss for row in result.log]
        assert losses[0] == pytest.approx(losses[1], abs=1e-12)
        assert losses[1] == pytest.approx(losses[2], abs=1e-12)

    def test_same_seed_identical_trajectory(self, small_corpus):
        runs = []
        for _ in range(2):
            model = tiny_model(seed=2)
            result = train(model, small_corpus, FAST)
            runs.append([(r.train_loss, r.dev_eer) for r in result.log])
        assert runs[0] == runs[1]

    def test_different_seed_differs(self, small_corpus):
        a = train(tiny_model(seed=2), small_corpus, FAST)
        b = train(tiny_model(seed=3), small_corpus,
                  TrainConfig(lr=1e-3, epochs=2, batch_size=16, seed=3))
        assert [r.train_loss for r in a.log] != [r.train_loss for r in b.log]

    def test_frozen_backbone_bits_never_move(self, small_corpus):
        model = tiny_model(seed=4)
        before = {
            name: entry.tensor.data.copy()
            for name, entry in model.store.items() if not entry.trainable
        }
        train(model, small_corpus, FAST)
        for name, data in before.items():
            np.testing.assert_array_equal(model.store[name].data, data, err_msg=name)

    def test_non_finite_loss_aborts_with_batch_id(self, small_corpus):
        model = tiny_model(seed=5)
        model.store["head.weight"].data[:] = np.inf
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteLossError, match="epoch 0, batch 0"):
                train(model, small_corpus, FAST)

    def test_best_state_tracks_minimum(self, small_corpus):
        model = tiny_model(seed=6)
        result = train(model, small_corpus, FAST)
        assert result.best_dev_eer == min(r.dev_eer for r in result.log)

    def test_target_eer_stops_early(self, small_corpus):
        model = tiny_model(seed=7)
        cfg = TrainConfig(lr=1e-3, epochs=50, batch_size=16, seed=7, target_dev_eer=101.0)
        result = train(model, small_corpus, cfg)
        assert len(result.log) == 1  # 101% is beaten by any EER


class TestCsv:
    def test_train_log_csv_shape(self, small_corpus):
        result = train(tiny_model(seed=8), small_corpus, FAST)
        text = train_log_csv(result.log)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,train_loss,dev_eer"
        assert len(lines) == 1 + len(result.log)
        assert text.endswith("\n") and "\r" not in text

    def test_scores_csv_shape(self, small_corpus):
        model = tiny_model(seed=8)
        text = scores_csv(small_corpus, score_corpus(model, small_corpus))
        lines = text.strip().split("\n")
        assert lines[0] == "record_id,label,score"
        assert len(lines) == 1 + len(small_corpus)


class TestAblation:
    def test_grid_runs_and_summarizes(self, small_corpus):
        base = AdapterConfig(variant="multiconv", kernels=(3,), bottleneck=4)
        grid = default_grid("aggregation", base)[:2]
        cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=16, seed=0)
        rows, summaries = run_ablation("aggregation", grid, ENC, cfg, small_corpus, seeds=[0, 1])
        assert len(rows) == 4
        assert all(math.isfinite(r.eer) for r in rows)
        assert len(summaries) == 2
        csv_text = ablation_csv(rows)
        assert csv_text.startswith("config_id,axis_value,seed,eer,params\n")

    def test_failures_recorded_not_fatal(self, small_corpus):
        base = AdapterConfig(variant="multiconv", kernels=(3,), bottleneck=4)
        bad = AdapterConfig(variant="lora", rank=ENC.model_dim * 2 // 3 + 20)  # rank > dim
        grid = [("good", base), ("bad", bad)]
        cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=16, seed=0)
        rows, summaries = run_ablation("method", grid, ENC, cfg, small_corpus, seeds=[0])
        assert math.isfinite(rows[0].eer)
        assert math.isnan(rows[1].eer) and rows[1].error
        assert math.isnan(summaries[1].mean_eer)

    def test_kernel_grid_shape(self):
        base = AdapterConfig(variant="multiconv", kernels=(3, 7, 15, 23), bottleneck=16)
        grid = default_grid("kernels", base)
        labels = [value for value, _ in grid]
        assert labels == ["empty", "3", "15", "3-23", "3-7-15-23"]

    def test_thread_env_respected(self, small_corpus, monkeypatch):
        monkeypatch.setenv("ADAPTLAB_THREADS", "2")
        base = AdapterConfig(variant="multiconv", kernels=(3,), bottleneck=4)
        grid = default_grid("placement", base)[:2]
        cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=16, seed=0)
        rows, _ = run_ablation("placement", grid, ENC, cfg, small_corpus, seeds=[0])
        assert [r.axis_value for r in rows] == ["mhsa", "ffn"]  # order preserved
