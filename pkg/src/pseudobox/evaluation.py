"""Detection metrics: AP@IoU, generalized base/novel reports, transfer and pseudo-label quality."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .boxes import Box, InvalidInputError, iou, iou_matrix

__all__ = [
    "Detection", "GroundTruthSet", "PRCurve", "EvalReport", "iou",
    "precision_recall_curve", "average_precision", "generalized_eval",
    "transfer_eval", "pseudo_label_quality",
]


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: str
    box: Box
    confidence: float

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "category": self.category,
                "box": self.box.as_list(), "confidence": self.confidence}

    @classmethod
    def from_json(cls, rec: Mapping) -> "Detection":
        return cls(str(rec["image_id"]), rec["category"], Box.from_list(rec["box"]),
                   float(rec["confidence"]))


@dataclass
class GroundTruthSet:
    """Per-image annotations plus the base/novel category split.

    ``vocabulary`` lists evaluation categories for transfer datasets that
    carry no split; it defaults to base | novel.
    """

    annotations: dict[str, list[tuple[Box, str]]] = field(default_factory=dict)
    base: frozenset = frozenset()
    novel: frozenset = frozenset()
    vocabulary: Optional[list[str]] = None
    images: Optional[list[str]] = None

    def __post_init__(self):
        self.base = frozenset(self.base)
        self.novel = frozenset(self.novel)
        overlap = self.base & self.novel
        if overlap:
            raise InvalidInputError(f"base and novel splits overlap: {sorted(overlap)}")
        if self.images is None:
            self.images = list(self.annotations)

    @property
    def categories(self) -> list[str]:
        if self.vocabulary is not None:
            return list(self.vocabulary)
        return sorted(self.base | self.novel)

    def boxes_for(self, category: str) -> dict[str, list[Box]]:
        out: dict[str, list[Box]] = defaultdict(list)
        for image_id, anns in self.annotations.items():
            for box, cat in anns:
                if cat == category:
                    out[image_id].append(box)
        return out

    def count(self, category: Optional[str] = None) -> int:
        return sum(1 for anns in self.annotations.values() for _, c in anns
                   if category is None or c == category)

    def subset(self, image_ids: Iterable[str]) -> "GroundTruthSet":
        ids = list(image_ids)
        return GroundTruthSet({i: list(self.annotations.get(i, [])) for i in ids},
                              self.base, self.novel, self.vocabulary, ids)


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    thresholds: np.ndarray


@dataclass
class EvalReport:
    per_class: dict[str, Optional[float]]
    novel_map: Optional[float]
    base_map: Optional[float]
    overall_map: Optional[float]
    counts: dict[str, int]
    novel: list[str] = field(default_factory=list)
    base: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_class": self.per_class,
            "novel_map": self.novel_map,
            "base_map": self.base_map,
            "overall_map": self.overall_map,
            "counts": self.counts,
            "novel": self.novel,
            "base": self.base,
        }

    def format_table(self) -> str:
        def f(v):
            return "  -  " if v is None else f"{v:.3f}"
        return ("Novel AP  Base AP  Overall AP\n"
                f"{f(self.novel_map):>8}  {f(self.base_map):>7}  {f(self.overall_map):>10}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "split", "ap"])
        for cat, ap in self.per_class.items():
            split = "novel" if cat in self.novel else "base" if cat in self.base else ""
            w.writerow([cat, split, "" if ap is None else repr(ap)])
        return buf.getvalue()


def _match(dets: Sequence[Detection], gt_by_image: Mapping[str, Sequence[Box]],
           iou_threshold: float):
    """Greedy confidence-ordered matching. Returns (order, tp flags)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gt_by_image.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        gts = gt_by_image.get(d.image_id, ())
        if not gts:
            continue
        ious = iou_matrix([d.box], gts)[0]
        ious[used[d.image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            used[d.image_id][j] = True
            tp[rank] = True
    return order, tp


def precision_recall_curve(dets: Sequence[Detection], gt_by_image: Mapping[str, Sequence[Box]],
                           iou_threshold: float = 0.5) -> PRCurve:
    n_gt = sum(len(v) for v in gt_by_image.values())
    order, tp = _match(dets, gt_by_image, iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    thresholds = np.array([dets[i].confidence for i in order], dtype=float)
    return PRCurve(precision, recall, thresholds)


def average_precision(dets: Sequence[Detection], gt_by_image: Mapping[str, Sequence[Box]],
                      iou_threshold: float = 0.5) -> Optional[float]:
    """All-points interpolated AP for a single class.

    Returns None when there is no ground truth and no detection (undefined).
    """
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        return None if not dets else 0.0
    if not dets:
        return 0.0
    curve = precision_recall_curve(dets, gt_by_image, iou_threshold)
    rec = np.concatenate(([0.0], curve.recall, [1.0]))
    prec = np.concatenate(([0.0], curve.precision, [0.0]))
    # precision envelope
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    idx = np.nonzero(rec[1:] != rec[:-1])[0]
    return float(np.sum((rec[idx + 1] - rec[idx]) * prec[idx + 1]))


def _group(dets: Iterable[Detection]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = defaultdict(list)
    for d in dets:
        out[d.category].append(d)
    return out


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _per_class(dets_by_cat, gt: GroundTruthSet, categories, iou_threshold):
    per_class: dict[str, Optional[float]] = {}
    for cat in categories:
        gt_boxes = gt.boxes_for(cat)
        if sum(len(v) for v in gt_boxes.values()) == 0:
            # undefined recall: excluded from the means
            per_class[cat] = None
            continue
        per_class[cat] = average_precision(dets_by_cat.get(cat, []), gt_boxes, iou_threshold)
    return per_class


def generalized_eval(detections: Sequence[Detection], gt: GroundTruthSet,
                     iou_threshold: float = 0.5) -> EvalReport:
    """Per-class AP and novel/base/overall means over base | novel."""
    if gt.base & gt.novel:
        raise InvalidInputError("base and novel splits overlap")
    categories = sorted(gt.base | gt.novel)
    stray = {d.category for d in detections} - set(categories)
    if stray:
        raise InvalidInputError(f"detections outside base|novel: {sorted(stray)}")
    unsplit = {c for anns in gt.annotations.values() for _, c in anns} - set(categories)
    if unsplit:
        raise InvalidInputError(f"ground-truth categories missing from split: {sorted(unsplit)}")
    per_class = _per_class(_group(detections), gt, categories, iou_threshold)
    novel = sorted(gt.novel)
    base = sorted(gt.base)
    return EvalReport(
        per_class=per_class,
        novel_map=_mean(per_class[c] for c in novel),
        base_map=_mean(per_class[c] for c in base),
        overall_map=_mean(per_class.values()),
        counts={"images": len(gt.images), "gt_boxes": gt.count(), "detections": len(detections)},
        novel=novel,
        base=base,
    )


def transfer_eval(detections: Sequence[Detection], gt: GroundTruthSet,
                  vocabulary: Optional[Sequence[str]] = None,
                  iou_threshold: float = 0.5) -> EvalReport:
    """AP over a target dataset's own vocabulary, no base/novel split."""
    vocab = list(vocabulary) if vocabulary is not None else gt.categories
    vset = set(vocab)
    stray = {d.category for d in detections} - vset
    if stray:
        raise InvalidInputError(f"detection categories not in target vocabulary: {sorted(stray)}")
    stray_gt = {c for anns in gt.annotations.values() for _, c in anns} - vset
    if stray_gt:
        raise InvalidInputError(f"ground-truth categories not in target vocabulary: {sorted(stray_gt)}")
    per_class = _per_class(_group(detections), gt, vocab, iou_threshold)
    m = _mean(per_class.values())
    return EvalReport(per_class=per_class, novel_map=None, base_map=None, overall_map=m,
                      counts={"images": len(gt.images), "gt_boxes": gt.count(),
                              "detections": len(detections)})


def pseudo_label_quality(labels, gt: GroundTruthSet, iou_threshold: float = 0.5) -> dict:
    """Precision/recall of pseudo labels against ground truth, per category and overall.

    ``labels`` items need ``pair_id``, ``category`` and ``box`` attributes; the
    pair id is the image id. Precision is None when nothing was emitted.
    """
    emitted: dict[str, int] = defaultdict(int)
    correct: dict[str, int] = defaultdict(int)
    matched: dict[str, set] = defaultdict(set)
    gt_index: dict[tuple, list[Box]] = defaultdict(list)
    for image_id, anns in gt.annotations.items():
        for box, cat in anns:
            gt_index[(image_id, cat)].append(box)
    for lab in labels:
        cat = lab.category
        emitted[cat] += 1
        hit = False
        for j, g in enumerate(gt_index.get((lab.pair_id, cat), ())):
            if iou(lab.box, g) >= iou_threshold:
                hit = True
                matched[cat].add((lab.pair_id, j))
        correct[cat] += hit

    cats = sorted(set(emitted) | {c for (_, c) in gt_index})
    per_category = {}
    for c in cats:
        n_gt = gt.count(c)
        per_category[c] = {
            "emitted": emitted[c],
            "correct": correct[c],
            "gt": n_gt,
            "precision": correct[c] / emitted[c] if emitted[c] else None,
            "recall": len(matched[c]) / n_gt if n_gt else None,
        }
    n_emit = sum(emitted.values())
    n_gt = gt.count()
    return {
        "precision": sum(correct.values()) / n_emit if n_emit else None,
        "recall": sum(len(v) for v in matched.values()) / n_gt if n_gt else None,
        "per_category": per_category,
    }


def write_report(report: EvalReport, path, csv_path=None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write(report.to_csv())

