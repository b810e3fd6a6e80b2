"""Test-time scoring and the three ranking metrics.

Detection AP at 0.5 IoU, CorLoc, and per-class image classification AP.
Scoring runs the frozen model per image; labels and saliency maps are
never used to produce scores. AP uses the continuous interpolation
(area under the monotone precision envelope); an 11-point mode is
available for comparability with older conventions.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .core import Box, ImageRecord, iou
from .model import ModelConfig, ModelParams, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    """One scored box: a proposal's bbox with its per-class score."""

    image_id: str
    class_id: int
    bbox: Box
    score: float
    proposal_index: int

    def __post_init__(self):
        if not np.isfinite(self.score) or not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass
class EvalReport:
    """Per-class metrics and their unweighted means.

    Classes without ground truth (or without positive images) are absent
    from the per-class maps and excluded from the means.
    """

    detection_ap: dict[int, float] = field(default_factory=dict)
    mean_detection_ap: float = 0.0
    corloc: dict[int, float] = field(default_factory=dict)
    mean_corloc: float = 0.0
    classification_ap: dict[int, float] = field(default_factory=dict)
    mean_classification_ap: float = 0.0
    num_images: int = 0
    num_gt_boxes: int = 0

    def as_json_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_gt_boxes": self.num_gt_boxes,
            "detection_ap": {str(c): v for c, v in sorted(self.detection_ap.items())},
            "mean_detection_ap": self.mean_detection_ap,
            "corloc": {str(c): v for c, v in sorted(self.corloc.items())},
            "mean_corloc": self.mean_corloc,
            "classification_ap": {
                str(c): v for c, v in sorted(self.classification_ap.items())
            },
            "mean_classification_ap": self.mean_classification_ap,
        }


def score_dataset(params: ModelParams, records: list[ImageRecord], config: ModelConfig):
    """Forward every image; returns (detections, image_scores).

    ``detections`` holds one Detection per (class, proposal);
    ``image_scores`` maps image_id to the per-class tau vector.
    """
    detections = []
    image_scores = {}
    for rec in records:
        trace = forward(params, rec.features, config)
        image_scores[rec.id] = trace.image_scores.copy()
        phi = trace.scores
        for i, prop in enumerate(rec.proposals):
            for c in range(config.num_classes):
                detections.append(
                    Detection(
                        image_id=rec.id,
                        class_id=c,
                        bbox=prop.bbox,
                        score=float(phi[i, c]),
                        proposal_index=i,
                    )
                )
    return detections, image_scores


def nms(detections: list[Detection], iou_threshold: float = 0.4) -> list[Detection]:
    """Greedy non-maximum suppression within each (image, class) group.

    Candidates are visited by descending score (ties by lower proposal
    index); a candidate is dropped when its IoU with an already kept box
    is >= the threshold. Output order follows the same total order, so
    the result is independent of input order.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError("iou_threshold must be in (0, 1)")
    groups: dict[tuple[str, int], list[Detection]] = {}
    for det in detections:
        groups.setdefault((det.image_id, det.class_id), []).append(det)
    kept = []
    for key in sorted(groups):
        dets = sorted(groups[key], key=lambda d: (-d.score, d.proposal_index))
        boxes = np.array([d.bbox.as_tuple() for d in dets], dtype=np.int64)
        mask = _accel.nms_keep(boxes, iou_threshold)
        kept.extend(d for d, keep in zip(dets, mask) if keep)
    return kept


def _pr_curve(tp_flags: np.ndarray, num_positive: int):
    """Cumulative precision/recall from a score-ordered TP/FP sequence."""
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_positive
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def _ap_from_pr(recall: np.ndarray, precision: np.ndarray, eleven_point: bool) -> float:
    if eleven_point:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t - 1e-12
            total += precision[mask].max() if mask.any() else 0.0
        return total / 11.0
    r = np.concatenate(([0.0], recall, [1.0]))
    p = np.concatenate(([0.0], precision, [0.0]))
    for k in range(p.size - 2, -1, -1):
        p[k] = max(p[k], p[k + 1])
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(((r[steps + 1] - r[steps]) * p[steps + 1]).sum())


def _sorted_dets(detections):
    return sorted(
        detections, key=lambda d: (-d.score, d.image_id, d.proposal_index)
    )


def detection_ap(
    detections: list[Detection],
    records: list[ImageRecord],
    iou_threshold: float = 0.5,
    eleven_point: bool = False,
) -> dict[int, float]:
    """Per-class average precision of (ideally post-NMS) detections.

    Each detection, in descending score order, is matched to the
    highest-IoU still-unmatched ground-truth box of its class in its
    image; it is a true positive when that IoU is >= the threshold,
    otherwise a false positive (duplicates included). Classes with no
    ground truth are skipped with a log note.
    """
    gt: dict[tuple[str, int], list[Box]] = {}
    classes = set()
    for rec in records:
        for c, box in rec.gt_boxes:
            gt.setdefault((rec.id, c), []).append(box)
            classes.add(c)
    for det in detections:
        classes.add(det.class_id)

    result = {}
    for c in sorted(classes):
        n_gt = sum(len(boxes) for (_, cc), boxes in gt.items() if cc == c)
        if n_gt == 0:
            log.info("class %d has no ground-truth boxes; AP undefined", c)
            continue
        dets = _sorted_dets(d for d in detections if d.class_id == c)
        if not dets:
            result[c] = 0.0
            continue
        matched: dict[tuple[str, int], set[int]] = {}
        tp_flags = np.zeros(len(dets), dtype=bool)
        for k, det in enumerate(dets):
            boxes = gt.get((det.image_id, c), [])
            used = matched.setdefault((det.image_id, c), set())
            best_iou, best_j = 0.0, -1
            for j, box in enumerate(boxes):
                if j in used:
                    continue
                v = iou(det.bbox, box)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_threshold:
                used.add(best_j)
                tp_flags[k] = True
        recall, precision = _pr_curve(tp_flags, n_gt)
        result[c] = _ap_from_pr(recall, precision, eleven_point)
    return result


def corloc(
    detections: list[Detection],
    records: list[ImageRecord],
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """Fraction of positive images whose top-scoring box hits a GT box.

    For each (image, positive class) pair the single highest-scoring raw
    detection of that class is checked against the class's ground truth
    at the IoU threshold. Classes with no positive images are skipped.
    """
    top: dict[tuple[str, int], Detection] = {}
    for det in detections:
        key = (det.image_id, det.class_id)
        cur = top.get(key)
        if (
            cur is None
            or det.score > cur.score
            or (det.score == cur.score and det.proposal_index < cur.proposal_index)
        ):
            top[key] = det

    hits: dict[int, list[bool]] = {}
    for rec in records:
        gt_by_class: dict[int, list[Box]] = {}
        for c, box in rec.gt_boxes:
            gt_by_class.setdefault(c, []).append(box)
        for c in rec.labels.positives:
            det = top.get((rec.id, c))
            ok = det is not None and any(
                iou(det.bbox, box) >= iou_threshold
                for box in gt_by_class.get(c, [])
            )
            hits.setdefault(c, []).append(ok)
    return {c: float(np.mean(flags)) for c, flags in sorted(hits.items())}


def classification_ap(
    image_scores: dict[str, np.ndarray],
    records: list[ImageRecord],
    eleven_point: bool = False,
) -> dict[int, float]:
    """Per-class AP of ranking images by their class score tau_c."""
    if not records:
        return {}
    num_classes = records[0].labels.y.shape[0]
    result = {}
    for c in range(num_classes):
        ranked = sorted(
            records, key=lambda r: (-float(image_scores[r.id][c]), r.id)
        )
        flags = np.array([r.labels.y[c] == 1 for r in ranked], dtype=bool)
        n_pos = int(flags.sum())
        if n_pos == 0:
            log.info("class %d has no positive images; AP undefined", c)
            continue
        recall, precision = _pr_curve(flags, n_pos)
        result[c] = _ap_from_pr(recall, precision, eleven_point)
    return result


def _mean(values: dict[int, float]) -> float:
    return float(np.mean(list(values.values()))) if values else 0.0


def evaluate(
    params: ModelParams,
    records: list[ImageRecord],
    config: ModelConfig,
    nms_threshold: float = 0.4,
    iou_threshold: float = 0.5,
    eleven_point: bool = False,
) -> EvalReport:
    """Full pipeline: score, NMS, and all three metrics in one report."""
    detections, image_scores = score_dataset(params, records, config)
    det_ap = detection_ap(
        nms(detections, nms_threshold), records, iou_threshold, eleven_point
    )
    loc = corloc(detections, records, iou_threshold)
    cls_ap = classification_ap(image_scores, records, eleven_point)
    return EvalReport(
        detection_ap=det_ap,
        mean_detection_ap=_mean(det_ap),
        corloc=loc,
        mean_corloc=_mean(loc),
        classification_ap=cls_ap,
        mean_classification_ap=_mean(cls_ap),
        num_images=len(records),
        num_gt_boxes=sum(len(r.gt_boxes) for r in records),
    )
