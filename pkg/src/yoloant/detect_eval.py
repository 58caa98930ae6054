"""Head decoding, non-maximum suppression and COCO-style detection metrics.

Conventions (all deterministic):

* detections are ranked by ``(score desc, x1, y1, x2, y2)``;
* matching is greedy in rank order, per image and class: a detection takes the
  unmatched ground truth with the highest IoU >= threshold, ties going to the
  lowest ground-truth index;
* AP uses 101-point interpolation of the precision envelope at recall
  ``0.00, 0.01, ..., 1.00``;
* size classes follow COCO areas: small ``<= 32^2``, medium ``32^2..96^2``,
  large ``>= 96^2``.  Ground truth outside the range is ignored, as are
  detections matched to it and unmatched detections outside the range.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, DomainError, FormatError, GeometryError
from .tensor_core import sigmoid

Box = Tuple[float, float, float, float]

COCO_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = tuple(i / 100 for i in range(101))
SIZE_RANGES = {
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, math.inf),
}


def box_area(box: Box) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def _check_box(box) -> Box:
    box = tuple(float(v) for v in box)
    if len(box) != 4 or not (box[2] > box[0] and box[3] > box[1]):
        raise GeometryError(f"box {box} must satisfy x2>x1 and y2>y1")
    return box


@dataclass(frozen=True)
class DetectionBox:
    image_id: str
    class_id: int
    score: float
    box: Box

    def __post_init__(self):
        if int(self.class_id) < 0:
            raise DomainError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= float(self.score) <= 1.0:
            raise DomainError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "image_id", str(self.image_id))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "box", _check_box(self.box))

    @property
    def area(self) -> float:
        return box_area(self.box)


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: Box

    def __post_init__(self):
        if int(self.class_id) < 0:
            raise DomainError(f"class_id must be >= 0, got {self.class_id}")
        object.__setattr__(self, "image_id", str(self.image_id))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "box", _check_box(self.box))

    @property
    def area(self) -> float:
        return box_area(self.box)


def rank_key(d: DetectionBox):
    """Total order on detections: score descending, then box coordinates."""
    return (-d.score, d.box[0], d.box[1], d.box[2], d.box[3], d.image_id, d.class_id)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def decode(
    heads: Sequence[np.ndarray],
    anchors: Sequence[Sequence[float]],
    strides: Sequence[int],
    conf_thresh: float = 0.25,
    *,
    image_size: Optional[Tuple[int, int]] = None,
    clip: bool = True,
    image_ids: Optional[Sequence[str]] = None,
) -> List[DetectionBox]:
    """Turn raw head tensors ``(N, na*(nc+5), H, W)`` into detections.

    Each anchor of each cell yields at most one box, labelled with its best
    class; the score is ``sigmoid(obj) * max sigmoid(cls)`` and is kept when
    strictly above ``conf_thresh``.  ``anchors[i]`` is a flat ``(w0, h0, w1,
    h1, ...)`` tuple for head ``i``.  Boxes are clipped to the image (by
    default ``H0*stride0`` x ``W0*stride0``); boxes that clip to zero area
    are dropped.
    """
    if len(heads) != len(anchors) or len(heads) != len(strides):
        raise DimensionError("heads, anchors and strides must have equal length")
    n = heads[0].shape[0]
    if image_size is None:
        image_size = (heads[0].shape[2] * strides[0], heads[0].shape[3] * strides[0])
    img_h, img_w = image_size
    ids = [str(i) for i in range(n)] if image_ids is None else [str(i) for i in image_ids]
    out: List[DetectionBox] = []
    for head, anc, stride in zip(heads, anchors, strides):
        anc = np.asarray(anc, dtype=np.float64).reshape(-1, 2)
        na = anc.shape[0]
        if head.ndim != 4 or head.shape[1] % na or head.shape[1] // na < 6:
            raise DimensionError(f"head with {head.shape[1]} channels does not split into {na} anchors x (nc+5)")
        if head.shape[0] != n:
            raise DimensionError("all heads must share the batch size")
        no = head.shape[1] // na
        _, _, h, w = head.shape
        s = sigmoid(np.asarray(head, dtype=np.float64)).reshape(n, na, no, h, w)
        gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        cx = (2.0 * s[:, :, 0] - 0.5 + gx) * stride
        cy = (2.0 * s[:, :, 1] - 0.5 + gy) * stride
        bw = (2.0 * s[:, :, 2]) ** 2 * anc[None, :, 0, None, None]
        bh = (2.0 * s[:, :, 3]) ** 2 * anc[None, :, 1, None, None]
        cls = np.argmax(s[:, :, 5:], axis=2)
        score = s[:, :, 4] * np.max(s[:, :, 5:], axis=2)
        x1, y1, x2, y2 = cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2
        if clip:
            x1, x2 = np.clip(x1, 0, img_w), np.clip(x2, 0, img_w)
            y1, y2 = np.clip(y1, 0, img_h), np.clip(y2, 0, img_h)
        keep = (score > conf_thresh) & (x2 > x1) & (y2 > y1)
        for b, a, i, j in zip(*np.nonzero(keep)):
            out.append(
                DetectionBox(
                    ids[b],
                    int(cls[b, a, i, j]),
                    float(score[b, a, i, j]),
                    (float(x1[b, a, i, j]), float(y1[b, a, i, j]), float(x2[b, a, i, j]), float(y2[b, a, i, j])),
                )
            )
    return out


# ---------------------------------------------------------------------------
# IoU and NMS
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (box_area(a) + box_area(b) - inter)


def _iou_one_to_many(a: np.ndarray, bs: np.ndarray) -> np.ndarray:
    # same operation order as iou() so results agree bitwise
    iw = np.minimum(a[2], bs[:, 2]) - np.maximum(a[0], bs[:, 0])
    ih = np.minimum(a[3], bs[:, 3]) - np.maximum(a[1], bs[:, 1])
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (bs[:, 2] - bs[:, 0]) * (bs[:, 3] - bs[:, 1]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = inter / union
    return np.where((iw > 0) & (ih > 0), out, 0.0)


def nms(dets: Iterable[DetectionBox], iou_thresh: float = 0.45) -> List[DetectionBox]:
    """Greedy per-image, per-class suppression of boxes with IoU > ``iou_thresh``."""
    groups: Dict[tuple, List[DetectionBox]] = defaultdict(list)
    for d in dets:
        groups[(d.image_id, d.class_id)].append(d)
    kept: List[DetectionBox] = []
    for key in sorted(groups):
        ranked = sorted(groups[key], key=rank_key)
        boxes = np.array([d.box for d in ranked], dtype=np.float64)
        alive = np.ones(len(ranked), dtype=bool)
        for i in range(len(ranked)):
            if not alive[i]:
                continue
            kept.append(ranked[i])
            rest = np.arange(i + 1, len(ranked))
            rest = rest[alive[rest]]
            if rest.size:
                alive[rest[_iou_one_to_many(boxes[i], boxes[rest]) > iou_thresh]] = False
    return sorted(kept, key=rank_key)


# ---------------------------------------------------------------------------
# matching, curves and AP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrCurve:
    """Cumulative precision/recall after each counted detection in rank order."""

    precision: Tuple[float, ...]
    recall: Tuple[float, ...]
    tp: int
    fp: int
    fn: int
    n_gt: int

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.precision, self.recall))

    @property
    def final_precision(self) -> float:
        return self.precision[-1] if self.precision else 0.0

    @property
    def final_recall(self) -> float:
        return self.recall[-1] if self.recall else 0.0


def _in_range(area: float, rng) -> bool:
    return rng is None or rng[0] <= area <= rng[1]


def match_and_curve(
    dets: Sequence[DetectionBox],
    gts: Sequence[GroundTruthBox],
    iou_thresh: float,
    area_range: Optional[Tuple[float, float]] = None,
) -> PrCurve:
    """Greedy matching of one class's detections to its ground truth."""
    by_image: Dict[str, List[Tuple[int, GroundTruthBox]]] = defaultdict(list)
    for idx, g in enumerate(gts):
        by_image[g.image_id].append((idx, g))
    ignored = {idx for idx, g in enumerate(gts) if not _in_range(g.area, area_range)}
    n_gt = len(gts) - len(ignored)
    matched = set()
    tp = fp = 0
    precision, recall = [], []
    for d in sorted(dets, key=rank_key):
        best = None  # (is_ignored, -iou, gt index)
        for idx, g in by_image.get(d.image_id, ()):
            if idx in matched:
                continue
            v = iou(d.box, g.box)
            if v >= iou_thresh:
                cand = (idx in ignored, -v, idx)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            matched.add(best[2])
            if best[0]:
                continue
            tp += 1
        elif not _in_range(d.area, area_range):
            continue
        else:
            fp += 1
        precision.append(tp / (tp + fp))
        recall.append(tp / n_gt if n_gt else 0.0)
    return PrCurve(tuple(precision), tuple(recall), tp, fp, n_gt - tp, n_gt)


def average_precision(curve: PrCurve) -> float:
    """101-point interpolated area under the precision envelope."""
    if curve.n_gt == 0 or not curve.precision:
        return 0.0
    q = np.maximum.accumulate(np.asarray(curve.precision)[::-1])[::-1]
    idx = np.searchsorted(np.asarray(curve.recall), RECALL_POINTS, side="left")
    total = float(np.sum(q[idx[idx < len(q)]]))
    return total / len(RECALL_POINTS)


@dataclass(frozen=True)
class EvalMetrics:
    precision: float
    recall: float
    map50: float
    map50_95: float
    map50_small: float
    map50_medium: float
    map50_large: float
    classes: Tuple[int, ...]
    per_class_ap: Dict[int, Tuple[float, ...]] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        return {
            "P": self.precision,
            "R": self.recall,
            "mAP.5": self.map50,
            "mAP.5:.95": self.map50_95,
            "mAP.5(small)": self.map50_small,
            "mAP.5(medium)": self.map50_medium,
            "mAP.5(large)": self.map50_large,
        }


def mean_ap(
    dets: Sequence[DetectionBox],
    gts: Sequence[GroundTruthBox],
    iou_thresholds: Sequence[float] = COCO_IOUS,
) -> EvalMetrics:
    """Class-mean AP averaged over ``iou_thresholds``, plus P/R, mAP.5 and size-split mAP.5.

    Classes are those with at least one ground-truth box.  P and R are the
    class means of the final point of each IoU-0.5 curve.  A size class with
    no ground truth at all reports ``nan``.
    """
    classes = tuple(sorted({g.class_id for g in gts}))
    if not classes:
        raise DomainError("mean AP needs at least one ground-truth class")
    iou_thresholds = tuple(iou_thresholds)
    det_by = defaultdict(list)
    gt_by = defaultdict(list)
    for d in dets:
        det_by[d.class_id].append(d)
    for g in gts:
        gt_by[g.class_id].append(g)

    per_class, ps, rs, ap50 = {}, [], [], []
    sized: Dict[str, List[float]] = {name: [] for name in SIZE_RANGES}
    for c in classes:
        aps = tuple(average_precision(match_and_curve(det_by[c], gt_by[c], t)) for t in iou_thresholds)
        per_class[c] = aps
        curve50 = match_and_curve(det_by[c], gt_by[c], 0.5)
        ps.append(curve50.final_precision)
        rs.append(curve50.final_recall)
        ap50.append(average_precision(curve50))
        for name, rng in SIZE_RANGES.items():
            curve = match_and_curve(det_by[c], gt_by[c], 0.5, rng)
            if curve.n_gt:
                sized[name].append(average_precision(curve))
    per_threshold = [float(np.mean([per_class[c][i] for c in classes])) for i in range(len(iou_thresholds))]
    return EvalMetrics(
        precision=float(np.mean(ps)),
        recall=float(np.mean(rs)),
        map50=float(np.mean(ap50)),
        map50_95=float(np.mean(per_threshold)),
        map50_small=float(np.mean(sized["small"])) if sized["small"] else math.nan,
        map50_medium=float(np.mean(sized["medium"])) if sized["medium"] else math.nan,
        map50_large=float(np.mean(sized["large"])) if sized["large"] else math.nan,
        classes=classes,
        per_class_ap=per_class,
    )


# ---------------------------------------------------------------------------
# text format: ``image_id class_id x1 y1 x2 y2 [score]``
# ---------------------------------------------------------------------------


def parse_boxes(text: str, *, with_score: bool, source: str = "<text>"):
    """Parse one box per line; blank lines and ``#`` comments are skipped."""
    out = []
    want = 7 if with_score else 6
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != want:
            raise FormatError(f"{source}:{lineno}: expected {want} fields, got {len(parts)}")
        try:
            cls = int(parts[1])
            box = tuple(float(v) for v in parts[2:6])
            if with_score:
                out.append(DetectionBox(parts[0], cls, float(parts[6]), box))
            else:
                out.append(GroundTruthBox(parts[0], cls, box))
        except (ValueError, GeometryError, DomainError) as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
    return out


def format_detections(dets: Iterable[DetectionBox]) -> str:
    lines = [
        f"{d.image_id} {d.class_id} {d.box[0]:.4f} {d.box[1]:.4f} {d.box[2]:.4f} {d.box[3]:.4f} {d.score:.6f}"
        for d in dets
    ]
    return "".join(line + "\n" for line in lines)
