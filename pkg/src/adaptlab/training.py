"""Adam optimization, the training loop, and the ablation harness.

Training is deterministic end to end: the train/dev split hashes record
ids (stable under corpus regeneration), epoch shuffles derive from
``SplitRng(seed).child(epoch)``, and the optimizer touches only
trainable parameters. Weight decay is decoupled (applied to the weights
before the Adam update) so the moment recurrences stay hand-checkable.
"""

from __future__ import annotations

import csv
import io
import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .adapters import AdapterConfig
from .data import Corpus
from .encoder import EncoderConfig
from .metrics import EvalResult, ScoreSet, compute_eer
from .model import MODES, SpoofModel, build_model
from .params import ParamStore
from .rng import SplitRng, hash_id
from .tensor import Tensor

DEV_FRACTION = 0.2
_SPLIT_SALT = 0x5EED5


class TrainConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """Training aborted because a batch produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    mode: str = "peft"
    # stop once dev EER beats this (None = always run all epochs)
    target_dev_eer: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise TrainConfigError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0.0:
            raise TrainConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainConfigError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise TrainConfigError(f"unknown mode {self.mode!r}; have {MODES}")


# The reference recipe the original system was trained with; kept for
# completeness even though it targets a pretrained full-size backbone.
PAPER_TRAIN_PRESET = TrainConfig(lr=1e-5, weight_decay=1e-4, epochs=50, batch_size=14)
TOY_TRAIN_PRESET = TrainConfig(lr=1e-3, weight_decay=1e-4, epochs=30, batch_size=32)


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class AdamState:
    slots: dict[str, AdamSlot] = field(default_factory=dict)


@dataclass
class AdamStepReport:
    updated: int = 0
    skipped: tuple[str, ...] = ()


def adam_step(store: ParamStore, state: AdamState, cfg: TrainConfig) -> AdamStepReport:
    """One decoupled-weight-decay Adam update over trainable entries.

    Trainable parameters whose grad is missing are skipped and reported;
    frozen parameters are never touched.
    """
    skipped: list[str] = []
    updated = 0
    for name, entry in store.trainable_items():
        t = entry.tensor
        if t.grad is None:
            skipped.append(name)
            continue
        slot = state.slots.get(name)
        if slot is None:
            slot = state.slots[name] = AdamSlot(np.zeros_like(t.data), np.zeros_like(t.data))
        g = t.grad
        slot.step += 1
        if cfg.weight_decay:
            t.data *= 1.0 - cfg.lr * cfg.weight_decay
        slot.m = cfg.beta1 * slot.m + (1.0 - cfg.beta1) * g
        slot.v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * (g * g)
        m_hat = slot.m / (1.0 - cfg.beta1 ** slot.step)
        v_hat = slot.v / (1.0 - cfg.beta2 ** slot.step)
        t.data -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(t.data.dtype)
        updated += 1
    return AdamStepReport(updated, tuple(skipped))


# -- train/dev split --------------------------------------------------------


def split_corpus(corpus: Corpus) -> tuple[list[int], list[int]]:
    """Deterministic ~80/20 split by hashing record ids, order-free."""
    train_idx, dev_idx = [], []
    for pos, rec in enumerate(corpus.records):
        (dev_idx if hash_id(rec.id, _SPLIT_SALT) < DEV_FRACTION else train_idx).append(pos)
    return train_idx, dev_idx


# -- training loop -----------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_eer: float


@dataclass
class TrainResult:
    log: list[EpochLog]
    best_state: dict[str, np.ndarray]
    best_dev_eer: float
    best_epoch: int
    dev_result: EvalResult


def _dev_eval(model: SpoofModel, features: np.ndarray, labels: np.ndarray,
              batch_size: int) -> EvalResult:
    scores = model.scores(features, batch_size=batch_size)
    return compute_eer(ScoreSet(labels, scores))


def train(model: SpoofModel, corpus: Corpus, cfg: TrainConfig) -> TrainResult:
    """Cross-entropy training with per-epoch dev EER tracking.

    Returns the log plus a snapshot of the best-dev-EER parameters.
    Epoch losses are aggregated per sample, so a frozen model logs a
    bit-identical loss every epoch regardless of shuffling.
    """
    train_idx, dev_idx = split_corpus(corpus)
    if not train_idx or not dev_idx:
        raise TrainConfigError("corpus too small to carve a train/dev split from")
    all_features = corpus.feature_array()
    all_labels = corpus.labels()
    train_x = all_features[train_idx]
    train_y = all_labels[train_idx]
    dev_x = all_features[dev_idx]
    dev_y = all_labels[dev_idx]

    shuffler = SplitRng(cfg.seed)
    state = AdamState()
    log: list[EpochLog] = []
    best: tuple[float, int, dict[str, np.ndarray]] | None = None
    dev_result: EvalResult | None = None

    for epoch in range(cfg.epochs):
        perm = shuffler.child(epoch).generator().permutation(len(train_idx))
        sample_losses: list[float] = []
        for batch_no, lo in enumerate(range(0, len(perm), cfg.batch_size)):
            pick = perm[lo:lo + cfg.batch_size]
            x = Tensor(train_x[pick].astype(model.dtype, copy=False))
            log_probs = T.log_softmax(model.forward(x))
            loss = T.nll_loss(log_probs, train_y[pick])
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no} "
                    f"(records {[int(corpus.records[train_idx[i]].id) for i in pick[:4]]}...)"
                )
            # per-sample values + fsum: the epoch loss is exactly independent
            # of how the shuffle grouped the batches
            picked = log_probs.data[np.arange(len(pick)), train_y[pick]]
            sample_losses.extend((-picked).astype(np.float64).tolist())
            if loss.requires_grad:
                T.backward(loss)
                adam_step(model.store, state, cfg)
            model.store.zero_grads()
        train_loss = math.fsum(sample_losses) / len(perm)

        dev_result = _dev_eval(model, dev_x, dev_y, cfg.batch_size)
        log.append(EpochLog(epoch, train_loss, dev_result.eer_percent))
        if best is None or dev_result.eer_percent < best[0]:
            best = (dev_result.eer_percent, epoch, model.store.snapshot())
        if cfg.target_dev_eer is not None and dev_result.eer_percent < cfg.target_dev_eer:
            break

    assert best is not None and dev_result is not None
    return TrainResult(log, best[2], best[0], best[1], dev_result)


def score_corpus(model: SpoofModel, corpus: Corpus, batch_size: int = 64) -> ScoreSet:
    scores = model.scores(corpus.feature_array(), batch_size=batch_size)
    return ScoreSet(corpus.labels(), scores)


# -- CSV emission -------------------------------------------------------------


def train_log_csv(log: list[EpochLog]) -> str:
    buf = io.StringIO()
    buf.write("epoch,train_loss,dev_eer\n")
    for row in log:
        buf.write(f"{row.epoch},{float(row.train_loss)!r},{float(row.dev_eer)!r}\n")
    return buf.getvalue()


def scores_csv(corpus: Corpus, score_set: ScoreSet) -> str:
    buf = io.StringIO()
    buf.write("record_id,label,score\n")
    for rec, label, score in zip(corpus.records, score_set.labels, score_set.scores):
        buf.write(f"{rec.id},{int(label)},{float(score)!r}\n")
    return buf.getvalue()


# -- ablation harness ----------------------------------------------------------


@dataclass
class AblationRow:
    config_id: str
    axis_value: str
    seed: int
    eer: float  # NaN when the run failed
    params: int
    error: str = ""


@dataclass
class AblationSummary:
    axis_value: str
    mean_eer: float
    stdev_eer: float
    runs: int


AXIS_NAMES = ("kernels", "aggregation", "placement", "method")


def default_grid(axis: str, base: AdapterConfig) -> list[tuple[str, AdapterConfig]]:
    """Desk-scale grids mirroring the published ablation axes."""
    if axis == "kernels":
        kernel_sets: list[tuple[int, ...]] = [(), (3,), (15,), (3, 23), (3, 7, 15, 23)]
        return [
            ("empty" if not ks else "-".join(map(str, ks)),
             replace(base, variant="multiconv", kernels=ks))
            for ks in kernel_sets
        ]
    if axis == "aggregation":
        return [(fusion, replace(base, variant="multiconv", fusion=fusion))
                for fusion in ("mixup_conv", "sum", "weighted_sum", "concat")]
    if axis == "placement":
        return [(placement, replace(base, variant="multiconv", placement=placement))
                for placement in ("mhsa", "ffn", "both")]
    if axis == "method":
        # prompt/rank sizes follow the base config; bottlenecks stay comparable
        return [
            ("multiconv", replace(base, variant="multiconv")),
            ("lora", replace(base, variant="lora")),
            ("houlsby", replace(base, variant="houlsby", placement="both")),
            ("bitfit", replace(base, variant="bitfit")),
            ("prompt", replace(base, variant="prompt")),
            ("none", replace(base, variant="none")),
        ]
    raise TrainConfigError(f"unknown ablation axis {axis!r}; have {AXIS_NAMES}")


def _ablation_threads() -> int:
    raw = os.environ.get("ADAPTLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_ablation(
    axis: str,
    grid: list[tuple[str, AdapterConfig]],
    encoder_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    seeds: list[int],
) -> tuple[list[AblationRow], list[AblationSummary]]:
    """Train every (config, seed) cell; failures are recorded, not fatal.

    Rows come back in grid-major order regardless of how many worker
    threads executed them (ADAPTLAB_THREADS caps parallelism).
    """
    cells = [
        (f"{axis}{i}", value, acfg, seed)
        for i, (value, acfg) in enumerate(grid)
        for seed in seeds
    ]

    def run_cell(cell) -> AblationRow:
        config_id, value, acfg, seed = cell
        try:
            model = build_model(encoder_cfg, acfg, seed=seed, mode=train_cfg.mode)
            result = train(model, corpus, replace(train_cfg, seed=seed))
            return AblationRow(config_id, value, seed, result.best_dev_eer,
                               model.num_trainable(exclude_head=True))
        except Exception as exc:  # isolated: one bad cell must not kill the grid
            return AblationRow(config_id, value, seed, float("nan"), 0, error=str(exc))

    threads = _ablation_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    summaries = []
    for value, _ in grid:
        eers = [r.eer for r in rows if r.axis_value == value and math.isfinite(r.eer)]
        if eers:
            mean = statistics.fmean(eers)
            stdev = statistics.stdev(eers) if len(eers) > 1 else 0.0
        else:
            mean = stdev = float("nan")
        summaries.append(AblationSummary(value, mean, stdev, len(eers)))
    return rows, summaries


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config_id", "axis_value", "seed", "eer", "params"])
    for r in rows:
        writer.writerow([r.config_id, r.axis_value, r.seed, repr(r.eer), r.params])
    return buf.getvalue()


def summary_text(axis: str, summaries: list[AblationSummary]) -> str:
    lines = [f"{axis:<14} {'mean EER%':>10} {'stdev':>8} {'runs':>5}"]
    for s in summaries:
        lines.append(f"{s.axis_value:<14} {s.mean_eer:>10.3f} {s.stdev_eer:>8.3f} {s.runs:>5}")
    return "\n".join(lines)
