"""Finite-difference checks of every primitive and of the composed bridge.

The error reported per case is the infinity-norm relative error
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over each
differentiated input, maximised over inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .bridge import BridgeConfig, BridgeState, bridge_forward
from .model import Targets, detection_loss
from .tensor import Tape, Tensor

EPS = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
                   eps: float = EPS) -> float:
    """Compare tape gradients of sum(fn(*inputs) * R) with central differences."""
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*tensors)
        weights = rng.normal(size=out.shape)
        loss = T.weighted_sum(out, weights) if out.size > 1 else out
    T.backward(tape, loss)

    def value(arrays) -> float:
        res = fn(*[Tensor(a) for a in arrays])
        return float(np.sum(res.values * weights)) if res.size > 1 else res.item()

    worst = 0.0
    for k, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        flat = numeric.reshape(-1)
        for i in range(x.size):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[k].reshape(-1)[i] += eps
            minus[k].reshape(-1)[i] -= eps
            flat[i] = (value(plus) - value(minus)) / (2 * eps)
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(x)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _conv_case(rng):
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 4]))
    stride = int(rng.choice([1, 2]))
    padding = int(rng.integers(0, 2))
    ho = int(rng.integers(2, 4))
    h = (ho - 1) * stride + k - 2 * padding
    if h < 1:
        padding, h = 0, (ho - 1) * stride + k
    x = rng.normal(size=(n, cin, h, h))
    return (lambda a, w, b: T.conv2d(a, w, b, stride, padding),
            [x, rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)])


def _pool_case(op):
    def build(rng):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        return op, [rng.normal(size=shape)]
    return build


def _linear_case(rng):
    n, cin, cout = (int(v) for v in rng.integers(1, 5, size=3))
    return T.linear, [rng.normal(size=(n, cin)), rng.normal(size=(cout, cin)), rng.normal(size=cout)]


def _unary_case(op):
    def build(rng):
        return op, [rng.normal(size=(2, 3, 2, 2)) * 2.0]
    return build


def _mul_case(rng):
    shape = (2, 3, 4, 4)
    mask_shape = [(2, 3, 1, 1), (2, 1, 4, 4), shape][int(rng.integers(0, 3))]
    return T.mul, [rng.normal(size=shape), rng.normal(size=mask_shape)]


def _add_case(rng):
    return T.add, [rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2))]


def _scale_case(rng):
    return T.scale, [rng.normal(size=(2, 3, 3)), rng.normal(size=(1,))]


def _reshape_case(rng):
    return (lambda a: T.reshape(a, (3, 4))), [rng.normal(size=(2, 6))]


def _sum_case(rng):
    return T.sum_all, [rng.normal(size=(2, 3, 2))]


def _weighted_sum_case(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: T.weighted_sum(a, w)), [rng.normal(size=(3, 4))]


def _loss_case(rng):
    n, c, g = 2, 2, 3
    obj = (rng.random((n, g, g)) < 0.3).astype(float)
    cls = np.zeros((n, c, g, g))
    cls[:, 0] = obj * (rng.random((n, g, g)) < 0.5)
    cls[:, 1] = obj - cls[:, 0]
    box = np.concatenate([rng.random((n, 2, g, g)), rng.normal(scale=0.5, size=(n, 2, g, g))], axis=1)
    targets = Targets(obj, box, cls)
    return (lambda raw: detection_loss(raw, targets)[0]), [rng.normal(size=(n, 5 + c, g, g))]


def _bridge_case(rng):
    c_ctx, c_task = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    n, h, w = 1, int(rng.integers(2, 6)), int(rng.integers(2, 6))
    state = BridgeState(BridgeConfig(c_ctx, c_task, reduction_ratio=2), rng)
    params = state.parameters()
    for p in params:
        p.tensor.values = rng.normal(scale=0.5, size=p.shape)

    def fn(f_in, x_ctx, *values):
        for p, v in zip(params, values):
            p.tensor = v
        return bridge_forward(f_in, x_ctx, state)

    inputs = [rng.normal(size=(n, c_task, h, w)), rng.normal(size=(n, c_ctx, h, w))]
    return fn, inputs + [p.values.copy() for p in params]


CASES: dict[str, Callable] = {
    "conv2d": _conv_case,
    "global_avg_pool": _pool_case(T.global_avg_pool),
    "global_max_pool": _pool_case(T.global_max_pool),
    "linear": _linear_case,
    "sigmoid": _unary_case(T.sigmoid),
    "relu": _unary_case(T.relu),
    "mul": _mul_case,
    "add": _add_case,
    "scale": _scale_case,
    "reshape": _reshape_case,
    "sum_all": _sum_case,
    "weighted_sum": _weighted_sum_case,
    "detection_loss": _loss_case,
    "bridge": _bridge_case,
}


def run(seed: int = 0, cases: int = 20, ops: list[str] | None = None) -> list[CheckResult]:
    if cases < 1:
        raise ValueError("need at least one case per op")
    results = []
    for k, name in enumerate(ops or list(CASES)):
        worst = 0.0
        for case in range(cases):
            rng = np.random.default_rng([seed, k, case])
            fn, inputs = CASES[name](rng)
            worst = max(worst, check_function(fn, inputs, rng))
        results.append(CheckResult(name, worst, cases))
    return results
