"""Tiny single-level grid detector and its dual-branch ARC variant.

Head output layout per cell: ``[tx, ty, tw, th, objectness, class_0 .. class_{C-1}]``.
Boxes decode as ``center = (cell + sigmoid(t_xy)) * stride`` and
``extent = prior * exp(t_wh)`` with ``prior = 2 * stride``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .bridge import BridgeConfig, BridgeState, bridge_forward, uniform_fan_in
from .checkpoint import Checkpoint, CheckpointError, entries_identical
from .fusion import BBox, Branch, Detection, VetoConfig, nms, veto_fuse
from .metrics import GroundTruth
from .tensor import Parameter, ShapeError, Tape, Tensor, sigmoid_values

NUM_BASE_CLASSES = 3
LOG_EXTENT_MIN = -8.0
# roughly 2.5 objects over 64 cells
OBJECTNESS_PRIOR_LOGIT = -3.2


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.input_size % self.stride:
            raise ValueError(f"input size {self.input_size} is not divisible by stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def grid(self) -> int:
        return self.input_size // self.stride


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int
    class_offset: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("a head needs at least one class")

    @property
    def outputs(self) -> int:
        return 5 + self.num_classes

    @property
    def class_ids(self) -> range:
        return range(self.class_offset, self.class_offset + self.num_classes)


@dataclass(frozen=True)
class LossWeights:
    obj: float = 1.0
    cls: float = 1.0
    box: float = 1.0


class Conv:
    """Conv layer. ``gain`` scales the uniform init bound 1/sqrt(fan_in); sqrt(6) gives He init."""

    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, gain: float = np.sqrt(6.0)):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(name + ".weight", gain * uniform_fan_in(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(name + ".bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Backbone:
    """Per stage: 4x4 stride-2 downsampling conv, then a 3x3 conv; ReLU after each."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone"):
        self.cfg = cfg
        self.layers: list[Conv] = []
        cin = 3
        for i, width in enumerate(cfg.widths):
            self.layers.append(Conv(f"{prefix}.stage{i}.down", cin, width, 4, rng, stride=2, padding=1))
            self.layers.append(Conv(f"{prefix}.stage{i}.conv", width, width, 3, rng))
            cin = width

    @property
    def out_channels(self) -> int:
        return self.cfg.widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = T.relu(layer(x))
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Head:
    """Two 3x3 conv + ReLU layers, then a 1x1 prediction conv."""

    def __init__(self, cfg: HeadConfig, channels: int, rng: np.random.Generator, prefix: str):
        self.cfg = cfg
        self.conv1 = Conv(prefix + ".conv1", channels, channels, 3, rng)
        self.conv2 = Conv(prefix + ".conv2", channels, channels, 3, rng)
        self.pred = Conv(prefix + ".pred", channels, cfg.outputs, 1, rng, gain=1.0)
        self.pred.bias.values[4] = OBJECTNESS_PRIOR_LOGIT

    def __call__(self, feat: Tensor) -> Tensor:
        return self.pred(T.relu(self.conv2(T.relu(self.conv1(feat)))))

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.conv2.parameters() + self.pred.parameters()


# ---------------------------------------------------------------------------
# decoding and loss


def decode(raw, cfg: HeadConfig, stride: int, input_size: int, conf_threshold: float = 0.001,
           image_ids: Sequence[int] | None = None, num_base: int = NUM_BASE_CLASSES,
           branch: Branch | None = None) -> list[Detection]:
    """Turn raw head output N×(5+C)×H×W into detections, one per cell at most.

    Without an explicit ``branch``, detections are tagged by class namespace:
    ids below ``num_base`` are context, the rest specialist.
    """
    values = raw.values if isinstance(raw, Tensor) else np.asarray(raw, dtype=float)
    n, ch, gh, gw = values.shape
    if ch != cfg.outputs:
        raise ShapeError(f"head output has {ch} channels, expected {cfg.outputs}")
    ids = list(range(n)) if image_ids is None else list(image_ids)
    prior = 2.0 * stride
    max_log = np.log(2.0 * input_size / prior)
    cols = np.arange(gw)[None, None, :]
    rows = np.arange(gh)[None, :, None]
    cx = (cols + sigmoid_values(values[:, 0])) * stride
    cy = (rows + sigmoid_values(values[:, 1])) * stride
    w = prior * np.exp(np.clip(values[:, 2], LOG_EXTENT_MIN, max_log))
    h = prior * np.exp(np.clip(values[:, 3], LOG_EXTENT_MIN, max_log))
    obj = sigmoid_values(values[:, 4])
    cls = sigmoid_values(values[:, 5:])
    best = cls.argmax(axis=1)
    conf = obj * np.take_along_axis(cls, best[:, None], axis=1)[:, 0]

    dets = []
    for k, i, j in zip(*np.nonzero(conf >= conf_threshold)):
        class_id = cfg.class_offset + int(best[k, i, j])
        tag = branch or (Branch.CONTEXT if class_id < num_base else Branch.SPECIALIST)
        half_w, half_h = w[k, i, j] / 2.0, h[k, i, j] / 2.0
        box = BBox(cx[k, i, j] - half_w, cy[k, i, j] - half_h, cx[k, i, j] + half_w, cy[k, i, j] + half_h)
        dets.append(Detection(box, class_id, float(conf[k, i, j]), tag, int(ids[k])))
    return dets


@dataclass
class Targets:
    obj: np.ndarray  # N×H×W in {0, 1}
    box: np.ndarray  # N×4×H×W: x/y offsets inside the cell, log extents over the prior
    cls: np.ndarray  # N×C×H×W one-hot on positive cells


def build_targets(gts: Sequence[Sequence[GroundTruth]], cfg: HeadConfig, stride: int, grid: int) -> Targets:
    """A cell is positive iff a box center of the head's classes falls in it (later boxes win)."""
    n = len(gts)
    obj = np.zeros((n, grid, grid))
    box = np.zeros((n, 4, grid, grid))
    cls = np.zeros((n, cfg.num_classes, grid, grid))
    prior = 2.0 * stride
    for k, scene in enumerate(gts):
        for g in scene:
            if g.class_id not in cfg.class_ids:
                continue
            b = g.box
            cx, cy = (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0
            j = min(int(cx // stride), grid - 1)
            i = min(int(cy // stride), grid - 1)
            obj[k, i, j] = 1.0
            box[k, :, i, j] = (cx / stride - j, cy / stride - i,
                               np.log((b.x2 - b.x1) / prior), np.log((b.y2 - b.y1) / prior))
            cls[k, :, i, j] = 0.0
            cls[k, g.class_id - cfg.class_offset, i, j] = 1.0
    return Targets(obj, box, cls)


def _bce_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


SMOOTH_L1_BETA = 0.1


def _smooth_l1(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    small = a < SMOOTH_L1_BETA
    value = np.where(small, 0.5 * d * d / SMOOTH_L1_BETA, a - 0.5 * SMOOTH_L1_BETA)
    slope = np.where(small, d / SMOOTH_L1_BETA, np.sign(d))
    return value, slope


def detection_loss(raw: Tensor, targets: Targets, weights: LossWeights = LossWeights()
                   ) -> tuple[Tensor, dict[str, float]]:
    """Objectness BCE averaged over all cells; class BCE and smooth-L1 box terms
    summed over their components and averaged over positive cells.
    """
    z = raw.values
    pos = targets.obj
    n_cells = pos.size
    n_pos = max(1.0, float(pos.sum()))
    z_obj, z_cls, z_box = z[:, 4], z[:, 5:], z[:, :4]

    loss_obj = _bce_logits(z_obj, pos).sum() / n_cells
    loss_cls = (_bce_logits(z_cls, targets.cls) * pos[:, None]).sum() / n_pos
    s_xy = sigmoid_values(z_box[:, :2])
    d = np.concatenate([s_xy - targets.box[:, :2], z_box[:, 2:] - targets.box[:, 2:]], axis=1)
    sl1, slope = _smooth_l1(d)
    loss_box = (sl1 * pos[:, None]).sum() / n_pos
    total = weights.obj * loss_obj + weights.cls * loss_cls + weights.box * loss_box

    def _backward(g):
        grad = np.zeros_like(z)
        grad[:, 4] = (weights.obj / n_cells) * (sigmoid_values(z_obj) - pos)
        grad[:, 5:] = (weights.cls / n_pos) * (sigmoid_values(z_cls) - targets.cls) * pos[:, None]
        box_grad = slope * pos[:, None]
        box_grad[:, :2] *= s_xy * (1.0 - s_xy)
        grad[:, :4] = (weights.box / n_pos) * box_grad
        return (grad * g,)

    parts = {"loss_obj": float(loss_obj), "loss_cls": float(loss_cls), "loss_box": float(loss_box)}
    return T.custom_op(np.array(total), (raw,), _backward), parts


# ---------------------------------------------------------------------------
# models


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


class Detector:
    """Backbone plus one head covering every class the model knows."""

    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: int = 0,
                 num_base: int = NUM_BASE_CLASSES):
        rng = np.random.default_rng([seed, 1])
        self.backbone_cfg = backbone_cfg
        self.num_base = num_base
        self.backbone = Backbone(backbone_cfg, rng)
        self.head = Head(head_cfg, self.backbone.out_channels, rng, "head")

    @property
    def heads(self) -> list[HeadConfig]:
        return [self.head.cfg]

    @property
    def class_ids(self) -> list[int]:
        return list(self.head.cfg.class_ids)

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.head.parameters()

    def protected_names(self) -> list[str]:
        """Pretrained-knowledge parameters: what ARC would freeze."""
        return [p.name for p in self.parameters()]

    def forward(self, images) -> dict[str, Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        _check_images(x, self.backbone_cfg)
        return {"head": self.head(self.backbone(x))}

    def loss(self, images, gts, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
        raw = self.forward(images)["head"]
        cfg = self.backbone_cfg
        return detection_loss(raw, build_targets(gts, self.head.cfg, cfg.stride, cfg.grid), weights)

    def predict(self, images: np.ndarray, image_ids: Sequence[int], conf_threshold: float = 0.001,
                nms_iou: float = 0.5, veto: VetoConfig | None = None, batch_size: int = 64) -> list[Detection]:
        cfg = self.backbone_cfg
        dets: list[Detection] = []
        for sl in _batches(len(images), batch_size):
            raw = self.forward(images[sl])["head"]
            dets += decode(raw, self.head.cfg, cfg.stride, cfg.input_size, conf_threshold,
                           image_ids[sl], self.num_base)
        dets = nms(dets, nms_iou)
        if veto is None:
            return dets
        ctx = [d for d in dets if d.branch is Branch.CONTEXT]
        spec = [d for d in dets if d.branch is Branch.SPECIALIST]
        return veto_fuse(ctx, spec, veto)


@dataclass
class Specialist:
    head: Head
    bridge: BridgeState

    def parameters(self) -> list[Parameter]:
        return self.head.parameters() + self.bridge.parameters()


class ArcModel:
    """Frozen backbone and context head, plus trainable bridge-fed specialist heads."""

    def __init__(self, backbone: Backbone, context_head: Head, specialists: list[Specialist],
                 num_base: int):
        self.backbone = backbone
        self.backbone_cfg = backbone.cfg
        self.context_head = context_head
        self.specialists = specialists
        self.num_base = num_base

    @property
    def heads(self) -> list[HeadConfig]:
        return [self.context_head.cfg] + [s.head.cfg for s in self.specialists]

    @property
    def class_ids(self) -> list[int]:
        return [c for h in self.heads for c in h.class_ids]

    def parameters(self) -> list[Parameter]:
        params = self.backbone.parameters() + self.context_head.parameters()
        for s in self.specialists:
            params += s.parameters()
        return params

    def protected_names(self) -> list[str]:
        return [p.name for p in self.parameters() if p.frozen]

    def forward(self, images, with_context: bool = True) -> dict[str, Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        _check_images(x, self.backbone_cfg)
        feat = self.backbone(x)
        out = {}
        if with_context:
            out["context"] = self.context_head(feat)
        for k, s in enumerate(self.specialists):
            # the context branch consumes feat directly; it serves as both X_ctx and F_in
            out[f"specialist.{k}"] = s.head(bridge_forward(feat, feat, s.bridge))
        return out

    def loss(self, images, gts, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
        """Loss over the specialist heads only; the context branch is not evaluated."""
        outs = self.forward(images, with_context=False)
        cfg = self.backbone_cfg
        total, parts = None, {"loss_obj": 0.0, "loss_cls": 0.0, "loss_box": 0.0}
        for k, s in enumerate(self.specialists):
            loss, p = detection_loss(outs[f"specialist.{k}"],
                                     build_targets(gts, s.head.cfg, cfg.stride, cfg.grid), weights)
            total = loss if total is None else T.add(total, loss)
            for key in parts:
                parts[key] += p[key]
        return total, parts

    def predict(self, images: np.ndarray, image_ids: Sequence[int], conf_threshold: float = 0.001,
                nms_iou: float = 0.5, veto: VetoConfig | None = None, batch_size: int = 64) -> list[Detection]:
        cfg = self.backbone_cfg
        ctx: list[Detection] = []
        spec: list[Detection] = []
        for sl in _batches(len(images), batch_size):
            outs = self.forward(images[sl])
            ctx += decode(outs["context"], self.context_head.cfg, cfg.stride, cfg.input_size,
                          conf_threshold, image_ids[sl], branch=Branch.CONTEXT)
            for k, s in enumerate(self.specialists):
                spec += decode(outs[f"specialist.{k}"], s.head.cfg, cfg.stride, cfg.input_size,
                               conf_threshold, image_ids[sl], branch=Branch.SPECIALIST)
        ctx, spec = nms(ctx, nms_iou), nms(spec, nms_iou)
        if veto is None:
            return ctx + spec
        return veto_fuse(ctx, spec, veto)


def _check_images(x: Tensor, cfg: BackboneConfig) -> None:
    s = cfg.input_size
    if x.values.ndim != 4 or x.shape[1:] != (3, s, s):
        raise ShapeError(f"images must be N×3×{s}×{s}, got {x.shape}")


# ---------------------------------------------------------------------------
# checkpoints and model construction


def checkpoint_of(model) -> Checkpoint:
    return Checkpoint.from_parameters(model.parameters())


def load_into(params: Sequence[Parameter], ckpt: Checkpoint, rename: dict[str, str] | None = None) -> None:
    """Copy checkpoint values into parameters (optionally reading under a different name)."""
    for p in params:
        src = (rename or {}).get(p.name, p.name)
        if src not in ckpt:
            raise CheckpointError(f"checkpoint has no entry {src!r}")
        values = ckpt[src].values
        if values.shape != p.shape:
            raise CheckpointError(f"entry {src!r} has shape {values.shape}, expected {p.shape}")
        p.tensor.values = values.copy()


def _backbone_cfg_from(ckpt: Checkpoint, input_size: int) -> BackboneConfig:
    widths = []
    i = 0
    while f"backbone.stage{i}.down.weight" in ckpt:
        widths.append(ckpt[f"backbone.stage{i}.down.weight"].values.shape[0])
        i += 1
    if not widths:
        raise CheckpointError("checkpoint holds no backbone entries")
    return BackboneConfig(input_size, tuple(widths))


def _head_classes(ckpt: Checkpoint, prefix: str) -> int:
    name = prefix + ".pred.weight"
    if name not in ckpt:
        raise CheckpointError(f"checkpoint has no entry {name!r}")
    return ckpt[name].values.shape[0] - 5


def detector_from_checkpoint(ckpt: Checkpoint, input_size: int = 64,
                             num_base: int = NUM_BASE_CLASSES) -> Detector:
    cfg = _backbone_cfg_from(ckpt, input_size)
    model = Detector(cfg, HeadConfig(_head_classes(ckpt, "head")), num_base=num_base)
    load_into(model.parameters(), ckpt)
    for p in model.parameters():
        p.frozen = ckpt[p.name].frozen
    return model


def extend_detector(ckpt: Checkpoint, extra_classes: int, seed: int = 0, input_size: int = 64,
                    num_base: int = NUM_BASE_CLASSES) -> Detector:
    """Pretrained detector whose head gains ``extra_classes`` freshly initialised class outputs."""
    base = detector_from_checkpoint(ckpt, input_size, num_base)
    old = base.head.cfg.num_classes
    model = Detector(base.backbone_cfg, HeadConfig(old + extra_classes), seed=seed, num_base=num_base)
    for p in model.parameters():
        if p.name == "head.pred.weight":
            p.tensor.values[:5 + old] = ckpt[p.name].values
        elif p.name == "head.pred.bias":
            p.tensor.values[:5 + old] = ckpt[p.name].values
        else:
            p.tensor.values = ckpt[p.name].values.copy()
    return model


def _assemble_arc(cfg: BackboneConfig, specialist_configs: Sequence[HeadConfig], bcfg: BridgeConfig,
                  seed: int, num_base: int) -> ArcModel:
    rng = np.random.default_rng([seed, 1])
    backbone = Backbone(cfg, rng)
    context = Head(HeadConfig(num_base), backbone.out_channels, rng, "context_head")
    c = backbone.out_channels
    if (bcfg.c_ctx, bcfg.c_task) != (c, c):
        raise ValueError(f"bridge channel counts must match the backbone width {c}")
    taken = set(context.cfg.class_ids)
    init_rng = np.random.default_rng([seed, 2])
    specialists = []
    for k, hcfg in enumerate(specialist_configs):
        if taken & set(hcfg.class_ids):
            raise ValueError(f"specialist {k} class ids {list(hcfg.class_ids)} overlap an existing head")
        taken |= set(hcfg.class_ids)
        head = Head(hcfg, c, init_rng, f"specialist.{k}")
        specialists.append(Specialist(head, BridgeState(bcfg, init_rng, prefix=f"bridge.0.head{k}.")))
    return ArcModel(backbone, context, specialists, num_base)


def build_arc(ckpt: Checkpoint, specialist_configs: Sequence[HeadConfig], bridge_config: BridgeConfig | None = None,
              seed: int = 0, input_size: int = 64, num_base: int = NUM_BASE_CLASSES,
              reduction_ratio: int = 8) -> ArcModel:
    """Wrap a pretrained single-head checkpoint: frozen backbone + context head, new specialists.

    ``bridge_config`` fixes the bridge hyperparameters; its channel counts are
    taken from the backbone when omitted.
    """
    cfg = _backbone_cfg_from(ckpt, input_size)
    n_ctx = _head_classes(ckpt, "head")
    if n_ctx != num_base:
        raise CheckpointError(f"checkpoint head predicts {n_ctx} classes, expected {num_base} base classes")
    c = cfg.widths[-1]
    bcfg = bridge_config or BridgeConfig(c_ctx=c, c_task=c, reduction_ratio=reduction_ratio)
    model = _assemble_arc(cfg, specialist_configs, bcfg, seed, num_base)
    load_into(model.backbone.parameters(), ckpt)
    load_into(model.context_head.parameters(), ckpt,
              {p.name: p.name.replace("context_head.", "head.", 1) for p in model.context_head.parameters()})
    for p in model.backbone.parameters() + model.context_head.parameters():
        p.frozen = True
    return model


def arc_from_checkpoint(ckpt: Checkpoint, input_size: int = 64, num_base: int = NUM_BASE_CLASSES) -> ArcModel:
    """Rebuild a saved ArcModel with its stored weights and frozen flags."""
    cfg = _backbone_cfg_from(ckpt, input_size)
    specs = []
    offset = num_base
    while f"specialist.{len(specs)}.pred.weight" in ckpt:
        n = _head_classes(ckpt, f"specialist.{len(specs)}")
        specs.append(HeadConfig(n, offset))
        offset += n
    c = cfg.widths[-1]
    hidden = ckpt["bridge.0.head0.mlp_w1"].values.shape[0] if specs else 1
    model = _assemble_arc(cfg, specs, BridgeConfig(c, c, reduction_ratio=max(1, c // hidden)), 0, num_base)
    load_into(model.parameters(), ckpt)
    for p in model.parameters():
        p.frozen = ckpt[p.name].frozen
    return model


def load_model(ckpt: Checkpoint, input_size: int = 64, num_base: int = NUM_BASE_CLASSES):
    if any(name.startswith("context_head.") for name in ckpt.names()):
        return arc_from_checkpoint(ckpt, input_size, num_base)
    return detector_from_checkpoint(ckpt, input_size, num_base)


def verify_frozen(model, before: Checkpoint, after: Checkpoint) -> bool:
    """True iff every protected entry of ``model`` is bit-identical in both checkpoints.

    For an ArcModel the protected set is its frozen parameters; for a plain
    Detector it is the pretrained backbone and head, which fine-tuning is free
    to change.
    """
    if set(before.names()) != set(after.names()):
        raise CheckpointError("checkpoints hold different entry names")
    names = model.protected_names()
    missing = [n for n in names if n not in before]
    if missing:
        raise CheckpointError(f"checkpoints lack model entries: {missing[:3]}")
    return all(entries_identical(before[n], after[n]) for n in names)


def freeze_report(model) -> dict[str, float]:
    """Fraction of frozen parameters per component group."""
    groups: dict[str, list[bool]] = {}
    for p in model.parameters():
        groups.setdefault(p.name.split(".")[0], []).append(p.frozen)
    return {k: sum(v) / len(v) for k, v in groups.items()}

