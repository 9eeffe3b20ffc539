"""Context-guided bridge: channel attention, spatial gating, scaled residual injection.

The bridge takes the feature map seen by the frozen context branch (``x_ctx``)
and adds a gated, projected copy of it to the specialist input ``f_in``::

    m_c   = sigmoid(mlp(avgpool(x_ctx)) + mlp(maxpool(x_ctx)))
    x_ref = m_c * x_ctx
    m_s   = sigmoid(conv7x7(conv1x1(x_ref)))
    out   = f_in + alpha * proj(m_s * x_ref)

With ``alpha == 0`` (the default initial value) the output equals ``f_in``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class BridgeConfig:
    c_ctx: int
    c_task: int
    reduction_ratio: int = 8
    alpha_init: float = 0.0
    spatial_kernel: int = 7
    compress_kernel: int = 1

    def __post_init__(self):
        if self.c_ctx < 1 or self.c_task < 1 or self.reduction_ratio < 1:
            raise ValueError("c_ctx, c_task and reduction_ratio must all be >= 1")
        if self.spatial_kernel != 7 or self.compress_kernel != 1:
            raise ValueError("the bridge uses a 1x1 compression and a 7x7 spatial kernel")

    @property
    def hidden(self) -> int:
        return max(1, self.c_ctx // self.reduction_ratio)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BridgeState:
    """Trainable weights of one bridge. The MLP weights are shared by both pooled descriptors."""

    FIELDS = (
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        "compress_w", "compress_b", "spatial_w", "spatial_b",
        "proj_w", "proj_b", "alpha",
    )

    def __init__(self, config: BridgeConfig, rng: np.random.Generator, prefix: str = "bridge.0."):
        c, h, t = config.c_ctx, config.hidden, config.c_task
        self.config = config
        self.prefix = prefix
        shapes = {
            "mlp_w1": ((h, c), c), "mlp_b1": ((h,), None),
            "mlp_w2": ((c, h), h), "mlp_b2": ((c,), None),
            "compress_w": ((h, c, 1, 1), c), "compress_b": ((h,), None),
            "spatial_w": ((1, h, 7, 7), h * 49), "spatial_b": ((1,), None),
            "proj_w": ((t, c, 1, 1), c), "proj_b": ((t,), None),
        }
        for field in self.FIELDS[:-1]:
            shape, fan_in = shapes[field]
            values = np.zeros(shape) if fan_in is None else uniform_fan_in(rng, shape, fan_in)
            setattr(self, field, Parameter(prefix + field, values))
        self.alpha = Parameter(prefix + "alpha", np.array([config.alpha_init], dtype=float))

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f) for f in self.FIELDS]


def _mlp(z: Tensor, state: BridgeState) -> Tensor:
    hidden = T.relu(T.linear(z, state.mlp_w1, state.mlp_b1))
    return T.linear(hidden, state.mlp_w2, state.mlp_b2)


def channel_attention(x_ctx: Tensor, state: BridgeState) -> tuple[Tensor, Tensor]:
    """Return (channel map N×C×1×1, channel-refined context N×C×H×W)."""
    if x_ctx.values.ndim != 4 or x_ctx.shape[1] != state.config.c_ctx:
        raise ShapeError(f"context features must be N×{state.config.c_ctx}×H×W, got {x_ctx.shape}")
    n, c = x_ctx.shape[:2]
    z_avg = T.reshape(T.global_avg_pool(x_ctx), (n, c))
    z_max = T.reshape(T.global_max_pool(x_ctx), (n, c))
    m_c = T.reshape(T.sigmoid(T.add(_mlp(z_avg, state), _mlp(z_max, state))), (n, c, 1, 1))
    return m_c, T.mul(x_ctx, m_c)


def spatial_gate(x_refined: Tensor, state: BridgeState) -> Tensor:
    """Single-channel spatial mask N×1×H×W; the 7x7 conv is padded to keep H×W."""
    if x_refined.values.ndim != 4 or x_refined.shape[1] != state.config.c_ctx:
        raise ShapeError(f"refined features must be N×{state.config.c_ctx}×H×W, got {x_refined.shape}")
    if x_refined.shape[2] < 1 or x_refined.shape[3] < 1:
        raise ShapeError("spatial gate needs H, W >= 1")
    compressed = T.conv2d(x_refined, state.compress_w, state.compress_b)
    return T.sigmoid(T.conv2d(compressed, state.spatial_w, state.spatial_b, padding=3))


def bridge_forward(f_in: Tensor, x_ctx: Tensor, state: BridgeState) -> Tensor:
    if f_in.values.ndim != 4 or f_in.shape[1] != state.config.c_task:
        raise ShapeError(f"task features must be N×{state.config.c_task}×H×W, got {f_in.shape}")
    if x_ctx.values.ndim != 4 or (f_in.shape[0], *f_in.shape[2:]) != (x_ctx.shape[0], *x_ctx.shape[2:]):
        raise ShapeError(f"f_in {f_in.shape} and x_ctx {x_ctx.shape} differ in batch or spatial extent")
    _, x_ref = channel_attention(x_ctx, state)
    m_s = spatial_gate(x_ref, state)
    injected = T.conv2d(T.mul(x_ref, m_s), state.proj_w, state.proj_b)
    return T.add(f_in, T.scale(injected, state.alpha))
