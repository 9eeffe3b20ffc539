"""SGD with momentum, weight decay and linear warm-up; pretraining and adaptation loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bridge import BridgeConfig
from .model import ArcModel, BackboneConfig, Detector, HeadConfig, LossWeights, build_arc, extend_detector
from .checkpoint import Checkpoint
from .synth import Dataset, TASK_CLASSES
from .tensor import Parameter, Tape, backward

log = logging.getLogger(__name__)

MODES = ("finetune", "joint", "arc")

# named random sub-streams derived from the run seed
STREAM_DATA = 11
STREAM_INIT = 22
STREAM_SHUFFLE = 33


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    # optimizer
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: int = 3
    epochs: int = 30
    batch_size: int = 8
    pretrain_epochs: int = 30
    # loss term weights
    loss_obj: float = 1.0
    loss_cls: float = 1.0
    loss_box: float = 1.0
    # data
    base_scenes: int = 1000
    task_scenes: int = 500
    mixed_scenes: int = 200
    input_size: int = 64
    widths: str = "8,16,64"
    # bridge
    reduction_ratio: int = 8
    alpha_init: float = 0.0
    # inference and evaluation
    conf_threshold: float = 0.001
    nms_iou: float = 0.5
    veto_iou: float = 0.5
    veto_conf: float = 0.5
    map_floor: float = 0.80

    def __post_init__(self):
        numeric = [getattr(self, f.name) for f in fields(self) if f.name != "widths"]
        if any(v < 0 for v in numeric):
            raise ValueError("configuration values must be nonnegative")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_obj, self.loss_cls, self.loss_box)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.input_size, tuple(int(w) for w in self.widths.split(",")))

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kind = {"float": float, "int": int, "str": str}[types[key]]
            try:
                values[key] = kind(value)
            except ValueError:
                raise ValueError(f"line {lineno}: bad value {value!r} for {key}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class OptimState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0


def lr_schedule(epoch: int, cfg: RunConfig) -> float:
    """Linear ramp to ``cfg.lr`` over the warm-up epochs, constant afterwards."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.lr


def sgd_step(params: list[Parameter], state: OptimState, lr: float, cfg: RunConfig) -> None:
    """v <- momentum*v + grad + decay*p ; p <- p - lr*v. Frozen parameters are skipped."""
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise TrainingDiverged(f"trainable parameter {p.name} has no gradient")
        v = state.velocity.get(p.name)
        g = p.grad + cfg.weight_decay * p.values
        v = g if v is None else cfg.momentum * v + g
        state.velocity[p.name] = v
        p.tensor.values = p.values - lr * v
    state.step += 1
    state.lr = lr


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_total: float
    loss_obj: float
    loss_cls: float
    loss_box: float


def train(model, data: Dataset, cfg: RunConfig, seed: int, epochs: int | None = None) -> list[EpochLog]:
    epochs = cfg.epochs if epochs is None else epochs
    params = [p for p in model.parameters() if not p.frozen]
    state = OptimState()
    rng = np.random.default_rng([seed, STREAM_SHUFFLE])
    weights = cfg.loss_weights
    history = []
    for epoch in range(epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(data))
        sums = np.zeros(4)
        batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            for p in params:
                p.tensor.grad = None
            with Tape() as tape:
                loss, parts = model.loss(data.images[idx], [data.gts[i] for i in idx], weights)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b} (shuffle seed {seed}, images {idx.tolist()})")
            backward(tape, loss)
            sgd_step(params, state, lr, cfg)
            sums += (value, parts["loss_obj"], parts["loss_cls"], parts["loss_box"])
            batches += 1
        row = EpochLog(epoch, lr, *(sums / batches))
        log.info("epoch %d lr %.5f loss %.4f", epoch, lr, row.loss_total)
        history.append(row)
    return history


def pretrain_base(base_train: Dataset, cfg: RunConfig, seed: int) -> tuple[Detector, list[EpochLog]]:
    model = Detector(cfg.backbone, HeadConfig(3), seed=seed * 1000 + STREAM_INIT)
    history = train(model, base_train, cfg, seed, epochs=cfg.pretrain_epochs)
    return model, history


def build_for_mode(mode: str, base_ckpt: Checkpoint, cfg: RunConfig, seed: int):
    """Mode-consistent model: nothing frozen for finetune/joint, backbone+context frozen for arc."""
    init_seed = seed * 1000 + STREAM_INIT
    n_task = len(TASK_CLASSES)
    if mode in ("finetune", "joint"):
        model = extend_detector(base_ckpt, n_task, seed=init_seed, input_size=cfg.input_size)
        for p in model.parameters():
            p.frozen = False
        return model
    if mode == "arc":
        c = cfg.backbone.widths[-1]
        bcfg = BridgeConfig(c, c, reduction_ratio=cfg.reduction_ratio, alpha_init=cfg.alpha_init)
        return build_arc(base_ckpt, [HeadConfig(n_task, class_offset=TASK_CLASSES[0])], bcfg,
                         seed=init_seed, input_size=cfg.input_size)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def adapt(model, mode: str, base_train: Dataset, task_train: Dataset, cfg: RunConfig,
          seed: int) -> list[EpochLog]:
    """finetune: all weights on task data; joint: all weights on base+task; arc: specialists on task."""
    if mode == "finetune":
        data = task_train
    elif mode == "joint":
        data = base_train.concat(task_train)
    elif mode == "arc":
        if not isinstance(model, ArcModel):
            raise ValueError("arc mode needs an ArcModel")
        data = task_train
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "arc" and any(p.frozen for p in model.parameters()):
        raise ValueError(f"{mode} mode trains every parameter, but some are frozen")
    return train(model, data, cfg, seed)


def write_log(history: list[EpochLog], path) -> None:
    lines = ["epoch,lr,loss_total,loss_obj,loss_cls,loss_box"]
    for r in history:
        lines.append(f"{r.epoch},{r.lr!r},{r.loss_total!r},{r.loss_obj!r},{r.loss_cls!r},{r.loss_box!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

