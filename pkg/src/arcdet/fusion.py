"""Box geometry, per-class NMS, and veto fusion of context/specialist detections."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence


class Branch(str, Enum):
    CONTEXT = "context"
    SPECIALIST = "specialist"


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    confidence: float
    branch: Branch = Branch.CONTEXT
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class VetoConfig:
    iou_threshold: float = 0.5
    context_confidence_floor: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.iou_threshold <= 1.0 and 0.0 <= self.context_confidence_floor <= 1.0):
            raise ValueError("veto thresholds must lie in [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression. Output is ordered by (confidence desc, input index)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    kept_by_class: dict[tuple[int, int], list[BBox]] = {}
    for i in order:
        d = dets[i]
        group = kept_by_class.setdefault((d.image_id, d.class_id), [])
        if any(iou(d.box, k) > iou_threshold for k in group):
            continue
        group.append(d.box)
        kept.append(d)
    return kept


def veto_fuse(context_dets: Sequence[Detection], specialist_dets: Sequence[Detection],
              cfg: VetoConfig = VetoConfig()) -> list[Detection]:
    """Drop specialist detections that overlap a confident context detection.

    The veto is class-agnostic and only looks at context detections of the
    same image. Context detections always pass through.
    """
    confident: dict[int, list[BBox]] = {}
    for c in context_dets:
        if c.confidence >= cfg.context_confidence_floor:
            confident.setdefault(c.image_id, []).append(c.box)
    survivors = [
        s for s in specialist_dets
        if not any(iou(c, s.box) > cfg.iou_threshold for c in confident.get(s.image_id, ()))
    ]
    return list(context_dets) + survivors


def split_by_branch(dets: Iterable[Detection]) -> tuple[list[Detection], list[Detection]]:
    ctx, spec = [], []
    for d in dets:
        (ctx if d.branch is Branch.CONTEXT else spec).append(d)
    return ctx, spec


# ---------------------------------------------------------------------------
# tab-separated interchange: image_id, branch, class_id, confidence, x1, y1, x2, y2


def format_detection(d: Detection) -> str:
    b = d.box
    return (f"{d.image_id}\t{d.branch.value}\t{d.class_id}\t{d.confidence:.6f}\t"
            f"{b.x1:.2f}\t{b.y1:.2f}\t{b.x2:.2f}\t{b.y2:.2f}")


def parse_detection(line: str) -> Detection:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 8:
        raise ValueError(f"expected 8 tab-separated fields, got {len(fields)}: {line!r}")
    image_id, branch, class_id, conf, x1, y1, x2, y2 = fields
    return Detection(
        box=BBox(float(x1), float(y1), float(x2), float(y2)),
        class_id=int(class_id),
        confidence=float(conf),
        branch=Branch(branch),
        image_id=int(image_id),
    )


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(format_detection(d) + "\n")


def read_detections(path) -> list[Detection]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [parse_detection(line) for line in lines if line.strip()]


def quantize(d: Detection) -> Detection:
    """Round a detection the way the interchange format does."""
    return parse_detection(format_detection(d))


def with_branch(d: Detection, branch: Branch) -> Detection:
    return replace(d, branch=branch)
