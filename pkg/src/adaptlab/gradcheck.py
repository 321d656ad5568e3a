"""Central finite-difference checking of analytic gradients.

Every registered op is checked in float64 with eps=1e-5 against its
backward rule: the loss is a fixed random projection of the op output,
and the numeric derivative of each input coordinate is compared to the
accumulated analytic gradient. The registry is what `adaptlab gradcheck`
and the acceptance suite iterate over.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import SplitRng

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class GradCheckCase:
    """One checkable op: a builder returning (inputs, forward)."""

    name: str
    build: Callable[[np.random.Generator], tuple[list[T.Tensor], Callable[..., T.Tensor]]]


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_err: float
    trials: int
    passed: bool


def _rand(gen: np.random.Generator, *shape: int) -> T.Tensor:
    return T.Tensor(gen.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _loss_of(forward, inputs, projector: np.ndarray) -> T.Tensor:
    out = forward(*inputs)
    return T.tsum(T.mul(out, T.Tensor(projector)))


def check_case(
    case: GradCheckCase,
    trials: int = 20,
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    seed: int = 20240901,
) -> GradCheckResult:
    """Run ``trials`` random instances of a case; return worst relative error.

    Relative error is ||analytic - numeric||_inf normalized by the larger
    of the two gradient magnitudes (floored at 1 to keep tiny gradients
    from inflating the ratio).
    """
    worst = 0.0
    root = SplitRng(seed)
    for trial in range(trials):
        gen = root.child(trial).generator()
        inputs, forward = case.build(gen)
        projector = gen.standard_normal(forward(*inputs).shape)

        loss = _loss_of(forward, inputs, projector)
        T.backward(loss)
        analytic = [
            np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
            for t in inputs
        ]

        for t, ana in zip(inputs, analytic):
            num = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = num.reshape(-1)
            with T.no_grad():
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = _loss_of(forward, inputs, projector).item()
                    flat[i] = orig - eps
                    lo = _loss_of(forward, inputs, projector).item()
                    flat[i] = orig
                    nflat[i] = (hi - lo) / (2.0 * eps)
            denom = max(1.0, float(np.abs(ana).max(initial=0.0)),
                        float(np.abs(num).max(initial=0.0)))
            err = float(np.abs(ana - num).max(initial=0.0)) / denom
            worst = max(worst, err)
    return GradCheckResult(case.name, worst, trials, worst <= tol)


# -- op registry -------------------------------------------------------


def _case_add(gen):
    a, b = _rand(gen, 3, 4), _rand(gen, 3, 4)
    return [a, b], T.add


def _case_add_broadcast(gen):
    a, b = _rand(gen, 2, 3, 4), _rand(gen, 4)
    return [a, b], T.add


def _case_mul(gen):
    a, b = _rand(gen, 3, 4), _rand(gen, 3, 4)
    return [a, b], T.mul


def _case_mul_broadcast(gen):
    a, b = _rand(gen, 2, 3, 4), _rand(gen, 1)
    return [a, b], T.mul


def _case_scale(gen):
    a = _rand(gen, 3, 5)
    return [a], lambda t: T.scale(t, -1.7)


def _case_matmul(gen):
    a, b = _rand(gen, 4, 5), _rand(gen, 5, 3)
    return [a, b], T.matmul


def _case_matmul_batched(gen):
    a, b = _rand(gen, 2, 3, 4, 5), _rand(gen, 2, 3, 5, 2)
    return [a, b], T.matmul


def _case_matmul_broadcast(gen):
    a, b = _rand(gen, 2, 4, 5), _rand(gen, 5, 3)
    return [a, b], T.matmul


def _case_depthwise_conv1d(gen):
    x, w = _rand(gen, 2, 3, 7), _rand(gen, 3, 5)
    return [x, w], T.depthwise_conv1d


def _case_depthwise_conv1d_wide(gen):
    # kernel wider than the sequence: padding extends
    x, w = _rand(gen, 1, 2, 4), _rand(gen, 2, 7)
    return [x, w], T.depthwise_conv1d


def _case_concat(gen):
    a, b, c = _rand(gen, 2, 2, 3), _rand(gen, 2, 3, 3), _rand(gen, 2, 1, 3)
    return [a, b, c], lambda *ts: T.concat(ts, axis=1)


def _case_split(gen):
    a = _rand(gen, 2, 6, 3)
    def forward(t):
        lo, hi = T.split(t, [2, 4], axis=1)
        return T.add(T.tsum(lo, axis=1), T.tsum(T.scale(hi, 2.0), axis=1))
    return [a], forward


def _case_reshape(gen):
    a = _rand(gen, 2, 3, 4)
    return [a], lambda t: T.reshape(t, (2, 12))


def _case_transpose(gen):
    a = _rand(gen, 2, 3, 4)
    return [a], lambda t: T.transpose(t, (2, 0, 1))


def _case_softmax(gen):
    a = _rand(gen, 3, 6)
    return [a], T.softmax


def _case_log_softmax(gen):
    a = _rand(gen, 3, 6)
    return [a], T.log_softmax


def _case_gelu(gen):
    a = _rand(gen, 4, 5)
    return [a], T.gelu


def _case_layer_norm(gen):
    a = _rand(gen, 3, 8)
    return [a], T.layer_norm


def _case_mean_axis(gen):
    a = _rand(gen, 3, 4, 5)
    return [a], lambda t: T.mean(t, axis=1)


def _case_mean_all(gen):
    a = _rand(gen, 3, 4)
    return [a], lambda t: T.mean(t)


def _case_sum_axis(gen):
    a = _rand(gen, 3, 4, 5)
    return [a], lambda t: T.tsum(t, axis=2)


def _case_nll_loss(gen):
    a = _rand(gen, 5, 3)
    targets = gen.integers(0, 3, size=5)
    return [a], lambda t: T.nll_loss(T.log_softmax(t), targets)


def _case_cross_entropy(gen):
    a = _rand(gen, 4, 2)
    targets = gen.integers(0, 2, size=4)
    return [a], lambda t: T.cross_entropy(t, targets)


OP_CASES: list[GradCheckCase] = [
    GradCheckCase("add", _case_add),
    GradCheckCase("add_broadcast", _case_add_broadcast),
    GradCheckCase("mul", _case_mul),
    GradCheckCase("mul_broadcast", _case_mul_broadcast),
    GradCheckCase("scale", _case_scale),
    GradCheckCase("matmul", _case_matmul),
    GradCheckCase("matmul_batched", _case_matmul_batched),
    GradCheckCase("matmul_broadcast", _case_matmul_broadcast),
    GradCheckCase("depthwise_conv1d", _case_depthwise_conv1d),
    GradCheckCase("depthwise_conv1d_wide", _case_depthwise_conv1d_wide),
    GradCheckCase("concat", _case_concat),
    GradCheckCase("split", _case_split),
    GradCheckCase("reshape", _case_reshape),
    GradCheckCase("transpose", _case_transpose),
    GradCheckCase("softmax", _case_softmax),
    GradCheckCase("log_softmax", _case_log_softmax),
    GradCheckCase("gelu", _case_gelu),
    GradCheckCase("layer_norm", _case_layer_norm),
    GradCheckCase("mean_axis", _case_mean_axis),
    GradCheckCase("mean_all", _case_mean_all),
    GradCheckCase("sum_axis", _case_sum_axis),
    GradCheckCase("nll_loss", _case_nll_loss),
    GradCheckCase("cross_entropy", _case_cross_entropy),
]


def adapter_cases() -> list[GradCheckCase]:
    """Gradient-check cases for every adapter variant on tiny dims.

    Imported lazily so the tensor layer stays free of model imports.
    """
    from .adapters import gradcheck_adapter_cases

    return gradcheck_adapter_cases()


def all_cases(include_adapters: bool = True) -> list[GradCheckCase]:
    cases = list(OP_CASES)
    if include_adapters:
        cases.extend(adapter_cases())
    return cases


def run_all(
    trials: int = 20,
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    include_adapters: bool = True,
) -> list[GradCheckResult]:
    return [check_case(c, trials=trials, eps=eps, tol=tol) for c in all_cases(include_adapters)]
