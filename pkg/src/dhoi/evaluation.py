"""HOI-triplet mAP evaluation and zero-shot split construction.

A detection is a true positive when min(IoU_human, IoU_object) >= threshold
against an unconsumed ground truth of the same (action, object) class,
greedily in score order. AP is all-point interpolated; aggregates are
arithmetic means over member classes that have ground truth.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, RangeError


@dataclass(frozen=True)
class DetRecord:
    image_id: str
    action: str
    object_class: str
    human_box: tuple
    object_box: tuple
    score: float

    @property
    def hoi_class(self):
        return (self.action, self.object_class)


@dataclass(frozen=True)
class GTRecord:
    image_id: str
    action: str
    object_class: str
    human_box: tuple
    object_box: tuple

    @property
    def hoi_class(self):
        return (self.action, self.object_class)


@dataclass
class EvalProtocol:
    setup: str = "default"  # "default" | "known_object"
    iou_threshold: float = 0.5
    partitions: dict = field(default_factory=dict)  # name -> set of hoi classes

    def __post_init__(self):
        if self.setup not in ("default", "known_object"):
            raise ContractError(f"unknown setup {self.setup!r}")
        if not (0 < self.iou_threshold < 1):
            raise RangeError(f"iou_threshold {self.iou_threshold} outside (0, 1)")


@dataclass
class EvalReport:
    protocol: str
    per_class_ap: dict
    counts: dict
    aggregates: dict

    def to_json(self) -> str:
        per_class = [{"hoi_id": f"{a}:{o}", "ap": ap, "n_gt": self.counts[(a, o)]}
                     for (a, o), ap in sorted(self.per_class_ap.items())]
        doc = {"protocol": self.protocol, "per_class": per_class,
               "aggregates": self.aggregates}
        return json.dumps(doc, indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"protocol: {self.protocol}",
                 f"{'hoi class':<40s}{'AP':>8s}{'n_gt':>7s}"]
        for (a, o), ap in sorted(self.per_class_ap.items()):
            lines.append(f"{a + ' ' + o:<40s}{ap:>8.4f}{self.counts[(a, o)]:>7d}")
        for name, value in sorted(self.aggregates.items()):
            lines.append(f"{'mAP[' + name + ']':<40s}{value:>8.4f}")
        return "\n".join(lines)


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ContractError(f"degenerate box in iou: {box_a} vs {box_b}")
    ix1, iy1 = max(ax1, bx1), max(ay1, by1)
    ix2, iy2 = min(ax2, bx2), min(ay2, by2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
    return inter / union if union > 0 else 0.0


def match_detections(dets, gts, iou_threshold: float = 0.5):
    """Greedy TP/FP flags for one image + class; dets pre-sorted by score.

    Overlap with a GT pair is min(IoU over human boxes, IoU over object
    boxes); each GT is consumed at most once and the best-overlap GT wins.
    """
    consumed = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_overlap = -1, 0.0
        for j, gt in enumerate(gts):
            if consumed[j]:
                continue
            overlap = min(iou(det.human_box, gt.human_box),
                          iou(det.object_box, gt.object_box))
            if overlap > best_overlap:
                best, best_overlap = j, overlap
        if best >= 0 and best_overlap >= iou_threshold:
            consumed[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags, n_gt: int) -> float:
    """All-point interpolated AP from ordered TP/FP flags."""
    if n_gt < 0:
        raise RangeError("n_gt must be >= 0")
    if n_gt == 0:
        return 0.0
    if not flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def evaluate(dets, gts, protocol: EvalProtocol) -> EvalReport:
    """Per-HOI-class AP plus aggregates under the named protocol.

    Under known_object, a class (action, object) only counts detections in
    images containing at least one GT of that object class (any action).
    """
    classes = sorted({g.hoi_class for g in gts} | {d.hoi_class for d in dets})
    images_with_object = {}
    if protocol.setup == "known_object":
        for g in gts:
            images_with_object.setdefault(g.object_class, set()).add(g.image_id)
    per_class_ap, counts = {}, {}
    for cls in classes:
        cls_gts = [g for g in gts if g.hoi_class == cls]
        cls_dets = [d for d in dets if d.hoi_class == cls]
        if protocol.setup == "known_object":
            allowed = images_with_object.get(cls[1], set())
            cls_dets = [d for d in cls_dets if d.image_id in allowed]
        cls_dets = sorted(cls_dets, key=lambda d: -d.score)
        gts_by_image = {}
        for g in cls_gts:
            gts_by_image.setdefault(g.image_id, []).append(g)
        consumed = {img: [False] * len(v) for img, v in gts_by_image.items()}
        flags = []
        for det in cls_dets:
            img_gts = gts_by_image.get(det.image_id, [])
            used = consumed.get(det.image_id, [])
            best, best_overlap = -1, 0.0
            for j, gt in enumerate(img_gts):
                if used[j]:
                    continue
                overlap = min(iou(det.human_box, gt.human_box),
                              iou(det.object_box, gt.object_box))
                if overlap > best_overlap:
                    best, best_overlap = j, overlap
            if best >= 0 and best_overlap >= protocol.iou_threshold:
                used[best] = True
                flags.append(True)
            else:
                flags.append(False)
        n_gt = len(cls_gts)
        if n_gt == 0 and not cls_dets:
            continue
        per_class_ap[cls] = average_precision(flags, n_gt)
        counts[cls] = n_gt
    scored = {c: ap for c, ap in per_class_ap.items() if counts[c] > 0}
    aggregates = {"full": float(np.mean(list(scored.values()))) if scored else 0.0}
    for name, members in protocol.partitions.items():
        vals = [ap for c, ap in scored.items() if c in members]
        aggregates[name] = float(np.mean(vals)) if vals else 0.0
    return EvalReport(protocol.setup, per_class_ap, counts, aggregates)


SPLIT_MODES = ("rf_uc", "nf_uc", "uv", "uo")


def class_frequencies(doc: dict) -> dict:
    """Triplet-class occurrence counts over a dataset document."""
    from .data import iter_hoi_triplets

    counts = {}
    for _, _, _, obj, action in iter_hoi_triplets(doc):
        counts[(action, obj)] = counts.get((action, obj), 0) + 1
    return counts


def make_splits(doc: dict, mode: str, unseen_count: int = 120,
                uv_verbs=None, uo_objects=None):
    """Seen/unseen triplet-class sets for a zero-shot setup.

    rf_uc / nf_uc hold out the lowest- / highest-frequency classes (ties by
    class id); uv / uo hold out every triplet containing the given verbs /
    objects.
    """
    if mode not in SPLIT_MODES:
        raise ContractError(f"unknown split mode {mode!r}")
    counts = class_frequencies(doc)
    classes = sorted(counts)
    if mode in ("rf_uc", "nf_uc"):
        if unseen_count > len(classes):
            raise RangeError(
                f"unseen_count {unseen_count} exceeds {len(classes)} classes")
        sign = 1 if mode == "rf_uc" else -1
        ordered = sorted(classes, key=lambda c: (sign * counts[c], c))
        unseen = set(ordered[:unseen_count])
    elif mode == "uv":
        verbs = set(uv_verbs or [])
        unseen = {c for c in classes if c[0] in verbs}
    else:
        objects = set(uo_objects or [])
        unseen = {c for c in classes if c[1] in objects}
    seen = set(classes) - unseen
    return seen, unseen


def filter_unseen(doc: dict, unseen) -> dict:
    """Remove every unseen-class HOI from the training annotations."""
    out = copy.deepcopy(doc)
    for ann in out["annotations"]:
        kept = []
        for hoi in ann["hois"]:
            obj = ann["objects"][hoi["object_idx"]]
            if (hoi["action"], obj["category"]) not in unseen:
                kept.append(hoi)
        ann["hois"] = kept
    return out
