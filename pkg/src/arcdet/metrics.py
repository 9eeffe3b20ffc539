"""COCO-style detection metrics and the forgetting measure.

AP uses 101-point interpolation over recall thresholds k/100. mAP values are
unweighted means over the classes whose AP is defined; a class with no ground
truth and no detections is left out, one with detections but no ground truth
scores 0.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fusion import BBox, Branch, Detection, read_detections

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0
PR_CONFIDENCE = 0.25
PR_IOU = 0.5


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    class_id: int
    box: BBox


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boxes a (n×4) and b (m×4)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _ranked(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def _greedy(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Match rows (already in rank order) to columns; returns matched column or -1 per row."""
    taken = np.zeros(ious.shape[1], dtype=bool)
    out = np.full(ious.shape[0], -1)
    for r in range(ious.shape[0]):
        cand = np.where(taken, -1.0, ious[r])
        j = int(np.argmax(cand)) if cand.size else -1
        if j >= 0 and cand[j] >= threshold:
            taken[j] = True
            out[r] = j
    return out


def _groups(dets: Sequence[Detection], gts: Sequence[GroundTruth]):
    """Yield (key, ranked det indices, gt indices) per (image, class)."""
    by_key: dict[tuple[int, int], tuple[list[int], list[int]]] = {}
    for i in _ranked(dets):
        d = dets[i]
        by_key.setdefault((d.image_id, d.class_id), ([], []))[0].append(i)
    for j, g in enumerate(gts):
        by_key.setdefault((g.image_id, g.class_id), ([], []))[1].append(j)
    for key in sorted(by_key):
        yield key, by_key[key][0], by_key[key][1]


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float) -> tuple[list[bool], int]:
    """Greedy confidence-ordered matching within each (image, class).

    Returns TP flags aligned with ``dets`` and the number of unmatched GTs.
    """
    flags = [False] * len(dets)
    fn = 0
    for _, di, gi in _groups(dets, gts):
        ious = _iou_matrix(np.array([dets[i].box.as_tuple() for i in di]).reshape(-1, 4),
                           np.array([gts[j].box.as_tuple() for j in gi]).reshape(-1, 4))
        match = _greedy(ious, iou_threshold)
        for i, m in zip(di, match):
            flags[i] = bool(m >= 0)
        fn += len(gi) - int((match >= 0).sum())
    return flags, fn


def average_precision(tp_sequence: Sequence[bool], num_gt: int) -> float | None:
    """101-point interpolated AP for TP/FP flags ordered by descending confidence.

    Returns None when there is neither ground truth nor any detection.
    """
    tp = np.asarray(tp_sequence, dtype=float)
    if num_gt == 0:
        return None if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    # correctly rounded sum, so hand-derived fractions come out exact
    return math.fsum(sampled.tolist()) / len(RECALL_POINTS)


@dataclass
class EvalReport:
    class_ids: tuple[int, ...]
    ap: dict[tuple[int, float], float | None]
    map50: float
    map5095: float
    precision: float
    recall: float
    counts: dict[int, tuple[int, int, int]]
    class_names: dict[int, str] = field(default_factory=dict)

    def name(self, class_id: int) -> str:
        return self.class_names.get(class_id, str(class_id))

    def class_map(self, class_id: int, threshold: float | None = None) -> float | None:
        if threshold is not None:
            return self.ap[(class_id, threshold)]
        vals = [self.ap[(class_id, t)] for t in IOU_THRESHOLDS]
        return None if vals[0] is None else float(np.mean(vals))


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_set: Iterable[int],
             class_names: dict[int, str] | None = None) -> EvalReport:
    class_ids = tuple(sorted(set(class_set)))
    if not class_ids:
        raise ValueError("evaluate needs a non-empty class set")
    wanted = set(class_ids)
    dets = [d for d in dets if d.class_id in wanted]
    gts = [g for g in gts if g.class_id in wanted]

    # per class: confidences, per-threshold TP flags, GT count (in global rank order)
    conf: dict[int, list[float]] = {c: [] for c in class_ids}
    order: dict[int, list[int]] = {c: [] for c in class_ids}
    flags: dict[int, dict[float, list[bool]]] = {c: {t: [] for t in IOU_THRESHOLDS} for c in class_ids}
    num_gt = {c: 0 for c in class_ids}
    for g in gts:
        num_gt[g.class_id] += 1

    for (_, cls), di, gi in _groups(dets, gts):
        ious = _iou_matrix(np.array([dets[i].box.as_tuple() for i in di]).reshape(-1, 4),
                           np.array([gts[j].box.as_tuple() for j in gi]).reshape(-1, 4))
        order[cls].extend(di)
        conf[cls].extend(dets[i].confidence for i in di)
        for t in IOU_THRESHOLDS:
            flags[cls][t].extend((_greedy(ious, t) >= 0).tolist())

    ap: dict[tuple[int, float], float | None] = {}
    counts: dict[int, tuple[int, int, int]] = {}
    for c in class_ids:
        rank = sorted(range(len(order[c])), key=lambda k: (-conf[c][k], order[c][k]))
        for t in IOU_THRESHOLDS:
            seq = [flags[c][t][k] for k in rank]
            ap[(c, t)] = average_precision(seq, num_gt[c])
        confident = [flags[c][PR_IOU][k] for k in rank if conf[c][k] >= PR_CONFIDENCE]
        tp = sum(confident)
        counts[c] = (tp, len(confident) - tp, num_gt[c] - tp)

    defined = [c for c in class_ids if ap[(c, IOU_THRESHOLDS[0])] is not None]
    map50 = float(np.mean([ap[(c, 0.5)] for c in defined])) if defined else 0.0
    map5095 = float(np.mean([np.mean([ap[(c, t)] for t in IOU_THRESHOLDS]) for c in defined])) if defined else 0.0
    tp = sum(v[0] for v in counts.values())
    fp = sum(v[1] for v in counts.values())
    fn = sum(v[2] for v in counts.values())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(class_ids, ap, map50, map5095, precision, recall, counts, dict(class_names or {}))


def forgetting_measure(map_base_before: float, map_base_after: float) -> float:
    """Change in base-class mAP, in percentage points; negative means forgetting."""
    return (map_base_after - map_base_before) * 100.0


def relative_forgetting(map_base_before: float, map_base_after: float) -> float | None:
    """Change in base-class mAP as a percentage of the pre-adaptation value."""
    if map_base_before == 0:
        return None
    return (map_base_after - map_base_before) / map_base_before * 100.0


# ---------------------------------------------------------------------------
# serialization


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou_threshold", "AP"])
    for c in report.class_ids:
        for t in IOU_THRESHOLDS:
            w.writerow([c, f"{t:.2f}", _fmt(report.ap[(c, t)])])
    for c in report.class_ids:
        for key, v in zip(("tp", "fp", "fn"), report.counts[c]):
            w.writerow([c, key, v])
    for key in ("map50", "map5095", "precision", "recall"):
        w.writerow(["all", key, _fmt(getattr(report, key))])
    return buf.getvalue()


def report_from_csv(text: str, class_names: dict[int, str] | None = None) -> EvalReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["class", "iou_threshold", "AP"]:
        raise ValueError("not an evaluation CSV (bad header)")
    ap: dict[tuple[int, float], float | None] = {}
    counts: dict[int, list[int]] = {}
    summary: dict[str, float] = {}
    for row in rows[1:]:
        if len(row) != 3:
            raise ValueError(f"malformed row {row!r}")
        cls, key, value = row
        if cls == "all":
            summary[key] = float(value)
        elif key in ("tp", "fp", "fn"):
            counts.setdefault(int(cls), [0, 0, 0])[("tp", "fp", "fn").index(key)] = int(value)
        else:
            ap[(int(cls), float(key))] = float(value) if value else None
    class_ids = tuple(sorted({c for c, _ in ap}))
    missing = {"map50", "map5095", "precision", "recall"} - set(summary)
    if missing:
        raise ValueError(f"evaluation CSV lacks summary rows: {sorted(missing)}")
    return EvalReport(class_ids, ap, summary["map50"], summary["map5095"], summary["precision"],
                      summary["recall"], {c: tuple(v) for c, v in counts.items()}, dict(class_names or {}))


def report_to_text(report: EvalReport, title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    lines.append(f"# operating point for precision/recall: confidence >= {PR_CONFIDENCE}, IoU >= {PR_IOU}")
    lines.append(f"mAP@0.5       {report.map50:.4f}")
    lines.append(f"mAP@0.5:0.95  {report.map5095:.4f}")
    lines.append(f"precision     {report.precision:.4f}")
    lines.append(f"recall        {report.recall:.4f}")
    lines.append("")
    lines.append(f"{'class':<12}{'AP50':>8}{'AP50:95':>9}{'TP':>6}{'FP':>6}{'FN':>6}")
    for c in report.class_ids:
        a50 = report.ap[(c, 0.5)]
        a = report.class_map(c)
        tp, fp, fn = report.counts[c]
        fmt = (lambda v: f"{v:.4f}" if v is not None else "n/a")
        lines.append(f"{report.name(c):<12}{fmt(a50):>8}{fmt(a):>9}{tp:>6}{fp:>6}{fn:>6}")
    return "\n".join(lines) + "\n"


def ground_truth_as_detections(gts: Iterable[GroundTruth], base_classes: Iterable[int]) -> list[Detection]:
    """Ground truth in the detection interchange shape (confidence 1)."""
    base = set(base_classes)
    return [Detection(g.box, g.class_id, 1.0,
                      Branch.CONTEXT if g.class_id in base else Branch.SPECIALIST, g.image_id)
            for g in gts]


def read_ground_truth(path) -> list[GroundTruth]:
    return [GroundTruth(d.image_id, d.class_id, d.box) for d in read_detections(Path(path))]
