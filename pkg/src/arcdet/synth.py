"""Deterministic synthetic detection scenes.

Base classes (circle, square, triangle) stand in for the original label set;
the rounded bar with a row of darker windows is the new class. A scene is a
pure function of ``(seed, mix, index)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fusion import BBox, format_detection
from .metrics import GroundTruth, ground_truth_as_detections

CLASS_NAMES = {0: "circle", 1: "square", 2: "triangle", 3: "bar"}
BASE_CLASSES = (0, 1, 2)
TASK_CLASSES = (3,)
MIXES = ("base", "task", "mixed")

IMAGE_SIZE = 64
MIN_SIZE, MAX_SIZE = 8, 24
MARGIN = 2
NOISE_SIGMA = 0.05
MAX_OVERLAP_IOU = 0.3

# fill value band per class
_VALUE_BANDS = {0: (0.85, 1.0), 1: (0.55, 0.7), 2: (0.7, 0.85), 3: (0.55, 0.7)}
_MIX_IDS = {"base": 101, "task": 202, "mixed": 303}


@dataclass
class Scene:
    image: np.ndarray  # 3×S×S, identical channels
    gts: list[GroundTruth]
    masks: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class _Placed:
    class_id: int
    x0: int
    y0: int
    w: int
    h: int
    horizontal: bool = True

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (float(self.x0), float(self.y0), float(self.x0 + self.w), float(self.y0 + self.h))


def _centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return c[None, :], c[:, None]  # x along columns, y along rows


def render_mask(obj: _Placed, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean foreground mask of one object; a pixel is in if its center is."""
    px, py = _centers(size)
    x0, y0, w, h = obj.x0, obj.y0, obj.w, obj.h
    inside = (px >= x0) & (px <= x0 + w) & (py >= y0) & (py <= y0 + h)
    if obj.class_id == 0:
        r = w / 2.0
        return (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    if obj.class_id == 1:
        return inside
    if obj.class_id == 2:
        # flat-topped triangle: top edge a third of the base
        t = (py - y0) / h
        half = (w / 3.0 + (2.0 * w / 3.0) * t) / 2.0
        return inside & (np.abs(px - (x0 + w / 2.0)) <= half)
    # rounded bar
    r = min(w, h) / 3.0
    cx = np.clip(px, x0 + r, x0 + w - r)
    cy = np.clip(py, y0 + r, y0 + h - r)
    return inside & ((px - cx) ** 2 + (py - cy) ** 2 <= r * r)


def _window_pattern(obj: _Placed, size: int) -> np.ndarray:
    """Row of alternating dark windows along the bar's long axis."""
    px, py = _centers(size)
    if obj.horizontal:
        across = (py - obj.y0) / obj.h
        along = px - obj.x0
    else:
        across = (px - obj.x0) / obj.w
        along = py - obj.y0
    band = (across >= 0.25) & (across <= 0.6)
    return band & (np.floor(along / 3.0) % 2 == 1)


def _sample_object(rng: np.random.Generator, class_id: int, size: int) -> _Placed:
    if class_id == 3:
        long_side = int(rng.integers(12, MAX_SIZE + 1))
        short_side = max(6, int(round(long_side * 0.45)))
        horizontal = bool(rng.integers(0, 2))
        w, h = (long_side, short_side) if horizontal else (short_side, long_side)
    else:
        w = h = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
        horizontal = True
    x0 = int(rng.integers(MARGIN, size - MARGIN - w + 1))
    y0 = int(rng.integers(MARGIN, size - MARGIN - h + 1))
    return _Placed(class_id, x0, y0, w, h, horizontal)


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _class_plan(rng: np.random.Generator, mix: str) -> list[int]:
    if mix == "base":
        return [int(c) for c in rng.choice(BASE_CLASSES, size=int(rng.integers(1, 5)))]
    if mix == "task":
        return [TASK_CLASSES[0]] * int(rng.integers(1, 5))
    n = int(rng.integers(2, 5))
    plan = [int(rng.choice(BASE_CLASSES)), TASK_CLASSES[0]]
    plan += [int(c) for c in rng.choice(BASE_CLASSES + TASK_CLASSES, size=n - 2)]
    return plan


def render_scene(seed: int, index: int, mix: str, size: int = IMAGE_SIZE,
                 with_masks: bool = False) -> Scene:
    if mix not in _MIX_IDS:
        raise ValueError(f"unknown class mix {mix!r}; expected one of {MIXES}")
    rng = np.random.default_rng([seed, _MIX_IDS[mix], index])
    placed: list[_Placed] = []
    for class_id in _class_plan(rng, mix):
        for _ in range(50):
            obj = _sample_object(rng, class_id, size)
            if all(_box_iou(obj.box, p.box) <= MAX_OVERLAP_IOU for p in placed):
                placed.append(obj)
                break

    canvas = np.full((size, size), rng.uniform(0.0, 0.2))
    masks = []
    for obj in placed:
        mask = render_mask(obj, size)
        lo, hi = _VALUE_BANDS[obj.class_id]
        value = rng.uniform(lo, hi)
        canvas[mask] = value
        if obj.class_id == 3:
            canvas[mask & _window_pattern(obj, size)] = 0.35 * value
        masks.append(mask)
    canvas = canvas + rng.normal(0.0, NOISE_SIGMA, size=canvas.shape)
    image = np.repeat(canvas[None], 3, axis=0)
    gts = [GroundTruth(index, p.class_id, BBox(*p.box)) for p in placed]
    return Scene(image, gts, masks if with_masks else [])


def generate(split_seed: int, count: int, class_mix: str, size: int = IMAGE_SIZE,
             start: int = 0) -> list[Scene]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [render_scene(split_seed, start + i, class_mix, size) for i in range(count)]


def split_indices(count: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    """Fixed-seed 80/10/10 train/test/val partition of ``range(count)``."""
    perm = np.random.default_rng([seed, 7]).permutation(count)
    n_train = int(round(fractions[0] * count))
    n_test = int(round(fractions[1] * count))
    return {
        "train": np.sort(perm[:n_train]),
        "test": np.sort(perm[n_train:n_train + n_test]),
        "val": np.sort(perm[n_train + n_test:]),
    }


@dataclass
class Dataset:
    images: np.ndarray  # N×3×S×S
    gts: list[list[GroundTruth]]
    image_ids: list[int]

    def __len__(self) -> int:
        return len(self.gts)

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], image_ids: Sequence[int] | None = None) -> "Dataset":
        ids = list(image_ids) if image_ids is not None else [s.gts[0].image_id for s in scenes]
        return cls(np.stack([s.image for s in scenes]), [list(s.gts) for s in scenes], ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], [self.gts[i] for i in idx], [self.image_ids[i] for i in idx])

    def concat(self, other: "Dataset") -> "Dataset":
        """Union of two datasets; the other's image ids are shifted past ours."""
        shift = max(self.image_ids, default=-1) + 1 - min(other.image_ids, default=0)
        gts = [[GroundTruth(g.image_id + shift, g.class_id, g.box) for g in scene] for scene in other.gts]
        return Dataset(np.concatenate([self.images, other.images]), self.gts + gts,
                       self.image_ids + [i + shift for i in other.image_ids])

    def all_gts(self) -> list[GroundTruth]:
        return [g for scene in self.gts for g in scene]


def build_splits(seed: int, count: int, mix: str) -> dict[str, Dataset]:
    pool = Dataset.from_scenes(generate(seed, count, mix))
    return {name: pool.subset(idx) for name, idx in split_indices(count, seed).items()}


def dump(scenes: Sequence[Scene], out_dir) -> None:
    """Write scenes as 8-bit PGM files plus one tab-separated label file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, scene in enumerate(scenes):
        image_id = scene.gts[0].image_id if scene.gts else k
        gray = np.clip(np.round(scene.image[0] * 255), 0, 255).astype(np.uint8)
        header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
        (out / f"{image_id:06d}.pgm").write_bytes(header + gray.tobytes())
        lines += [format_detection(d) for d in ground_truth_as_detections(scene.gts, BASE_CLASSES)]
    (out / "labels.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
