"""Segmentation metrics and the background-threshold sweep.

Everything is built on one integer accumulator: a confusion matrix over
class ids (background included) plus true/false-positive counters for
the foreground-as-a-whole and for each class's discriminative (DR) and
non-discriminative (NDR) ground-truth sub-regions. Counts are exact
integers, so merging per-image accumulators is associative and
order-independent, and derived ratios are reproducible.

Conventions:

* label masks are uint8-ish integer arrays, 0 = background, 255 =
  ignore (excluded from every count);
* a ratio whose denominator is zero is *undefined* and reported as
  ``None``, never 0 or NaN; macro means skip undefined classes;
* per-class IoU uses intersection / union with union = row + column -
  diagonal; classes never seen and never predicted are excluded from
  the mean;
* foreground precision is class-agnostic: predicted-foreground pixels
  that are ground-truth foreground of any class count as correct.

The threshold sweep scores ``resolve_basic`` over a grid of background
thresholds and picks the mIoU-maximizing one (ties to the smallest).
The default implementation precomputes each image's best score and
best class once; ``naive=True`` recomputes the resolution per
threshold from scratch, which must agree exactly.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import IGNORE_LABEL
from .errors import ConfigError, ShapeError
from .resolve import label_from_stack, stack_scores

TAU_GRID = tuple(round(0.01 * i, 2) for i in range(1, 51))


class ConfusionAccumulator:
    """Pixel-count accumulator over one or more images."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ConfigError(f"need background plus >= 1 class, got {num_classes}")
        if num_classes > IGNORE_LABEL:
            raise ConfigError(f"num_classes must be <= {IGNORE_LABEL}, got {num_classes}")
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), np.uint64)
        self.dr_tp = np.zeros(num_classes, np.uint64)
        self.dr_fn = np.zeros(num_classes, np.uint64)
        self.ndr_tp = np.zeros(num_classes, np.uint64)
        self.ndr_fn = np.zeros(num_classes, np.uint64)
        self.fg_tp = 0
        self.fg_fp = 0
        self.num_images = 0

    def _check_labels(self, arr: np.ndarray, what: str, allow_ignore: bool) -> np.ndarray:
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ConfigError(f"{what} must be an integer label mask, got {arr.dtype}")
        arr = arr.astype(np.int64)
        bad = (arr < 0) | (arr >= self.num_classes)
        if allow_ignore:
            bad &= arr != IGNORE_LABEL
        if np.any(bad):
            raise ConfigError(
                f"{what} contains label {int(arr[bad][0])} outside "
                f"[0, {self.num_classes}) for this accumulator"
            )
        return arr

    def add(self, pred: np.ndarray, gt: np.ndarray, dr_partitions=None) -> "ConfusionAccumulator":
        """Accumulate one image.

        ``dr_partitions`` maps class id -> (dr_mask, ndr_mask), the
        boolean ground-truth sub-regions from the attribution partition;
        omit it when DR/NDR recall is not being tracked.
        """
        pred = self._check_labels(pred, "prediction", allow_ignore=False)
        gt = self._check_labels(gt, "ground truth", allow_ignore=True)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
        valid = gt != IGNORE_LABEL
        pv, gv = pred[valid], gt[valid]
        c = self.num_classes
        self.matrix += np.bincount(gv * c + pv, minlength=c * c).reshape(c, c).astype(np.uint64)
        self.fg_tp += int(np.count_nonzero((pv > 0) & (gv > 0)))
        self.fg_fp += int(np.count_nonzero((pv > 0) & (gv == 0)))
        if dr_partitions:
            for class_id, (dr, ndr) in dr_partitions.items():
                if not 1 <= class_id < c:
                    raise ConfigError(f"partition class id {class_id} out of range")
                if dr.shape != gt.shape or ndr.shape != gt.shape:
                    raise ShapeError("partition shape does not match the ground truth")
                if np.any(dr & ndr):
                    raise ConfigError("DR and NDR partitions overlap")
                dr_hit = pred[dr & valid] == class_id
                ndr_hit = pred[ndr & valid] == class_id
                self.dr_tp[class_id] += int(np.count_nonzero(dr_hit))
                self.dr_fn[class_id] += int(dr_hit.size - np.count_nonzero(dr_hit))
                self.ndr_tp[class_id] += int(np.count_nonzero(ndr_hit))
                self.ndr_fn[class_id] += int(ndr_hit.size - np.count_nonzero(ndr_hit))
        self.num_images += 1
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        """In-place merge; pure integer addition, so any merge order
        gives identical totals."""
        if other.num_classes != self.num_classes:
            raise ConfigError("cannot merge accumulators with different class counts")
        self.matrix += other.matrix
        self.dr_tp += other.dr_tp
        self.dr_fn += other.dr_fn
        self.ndr_tp += other.ndr_tp
        self.ndr_fn += other.ndr_fn
        self.fg_tp += other.fg_tp
        self.fg_fp += other.fg_fp
        self.num_images += other.num_images
        return self

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def per_class_iou(acc: ConfusionAccumulator) -> list:
    """IoU per class id; ``None`` for classes with an empty union."""
    m = acc.matrix.astype(np.float64)
    inter = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - inter
    out = []
    for c in range(acc.num_classes):
        out.append(float(inter[c] / union[c]) if union[c] > 0 else None)
    return out


def miou(acc: ConfusionAccumulator) -> tuple[float, list]:
    """Mean IoU over classes with nonzero union, plus the per-class list."""
    if acc.total == 0:
        raise ConfigError("empty accumulator: nothing has been accumulated")
    ious = per_class_iou(acc)
    defined = [v for v in ious if v is not None]
    return float(np.mean(defined)), ious


def fg_precision(acc: ConfusionAccumulator):
    """Foreground precision (class-agnostic); None with no foreground
    predictions."""
    denom = acc.fg_tp + acc.fg_fp
    return acc.fg_tp / denom if denom else None


def dr_recall(acc: ConfusionAccumulator, class_id: int):
    tp, fn = int(acc.dr_tp[class_id]), int(acc.dr_fn[class_id])
    return tp / (tp + fn) if tp + fn else None


def ndr_recall(acc: ConfusionAccumulator, class_id: int):
    tp, fn = int(acc.ndr_tp[class_id]), int(acc.ndr_fn[class_id])
    return tp / (tp + fn) if tp + fn else None


def overall_recall(acc: ConfusionAccumulator, class_id: int):
    """Plain recall from the confusion matrix (ground-truth row)."""
    row = int(acc.matrix[class_id].sum())
    return int(acc.matrix[class_id, class_id]) / row if row else None


def _macro(values: dict):
    defined = [v for v in values.values() if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary for one run at one background threshold."""

    tau: float
    num_images: int
    num_classes: int
    miou: float
    per_class_iou: tuple
    fg_precision: object
    dr_recall: dict
    ndr_recall: dict
    macro_dr_recall: object
    macro_ndr_recall: object

    def to_json(self) -> str:
        payload = {
            "tau": self.tau,
            "num_images": self.num_images,
            "num_classes": self.num_classes,
            "miou": self.miou,
            "per_class_iou": list(self.per_class_iou),
            "fg_precision": self.fg_precision,
            "dr_recall": {str(k): v for k, v in sorted(self.dr_recall.items())},
            "ndr_recall": {str(k): v for k, v in sorted(self.ndr_recall.items())},
            "macro_dr_recall": self.macro_dr_recall,
            "macro_ndr_recall": self.macro_ndr_recall,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.9g}"

        lines = ["metric,value"]
        lines.append(f"tau,{self.tau:.9g}")
        lines.append(f"num_images,{self.num_images}")
        lines.append(f"miou,{fmt(self.miou)}")
        lines.append(f"fg_precision,{fmt(self.fg_precision)}")
        for c, v in enumerate(self.per_class_iou):
            lines.append(f"iou_class_{c},{fmt(v)}")
        for c in sorted(self.dr_recall):
            lines.append(f"dr_recall_class_{c},{fmt(self.dr_recall[c])}")
        for c in sorted(self.ndr_recall):
            lines.append(f"ndr_recall_class_{c},{fmt(self.ndr_recall[c])}")
        lines.append(f"macro_dr_recall,{fmt(self.macro_dr_recall)}")
        lines.append(f"macro_ndr_recall,{fmt(self.macro_ndr_recall)}")
        return "\n".join(lines) + "\n"


def build_report(acc: ConfusionAccumulator, tau: float) -> MetricsReport:
    mean_iou, ious = miou(acc)
    dr = {c: dr_recall(acc, c) for c in range(1, acc.num_classes)}
    ndr = {c: ndr_recall(acc, c) for c in range(1, acc.num_classes)}
    return MetricsReport(
        tau=float(tau),
        num_images=acc.num_images,
        num_classes=acc.num_classes,
        miou=mean_iou,
        per_class_iou=tuple(ious),
        fg_precision=fg_precision(acc),
        dr_recall=dr,
        ndr_recall=ndr,
        macro_dr_recall=_macro(dr),
        macro_ndr_recall=_macro(ndr),
    )


# ---------------------------------------------------------------------------
# Threshold sweep


@dataclass(frozen=True)
class SweepResult:
    tau_star: float
    report: MetricsReport
    taus: tuple
    mious: tuple

    def to_csv(self) -> str:
        lines = ["tau,miou"]
        for tau, value in zip(self.taus, self.mious):
            lines.append(f"{tau:.9g},{value:.9g}")
        return "\n".join(lines) + "\n"


def _evaluate_grid_fast(stacks, gts, num_classes, grid):
    """Per-threshold mIoU with the per-image best score / best class
    precomputed once."""
    prepared = []
    for score_maps, gt in zip(stacks, gts):
        values, class_ids = stack_scores(score_maps)
        best = values.max(axis=0)
        label = class_ids[np.argmax(values, axis=0)].astype(np.uint8)
        prepared.append((best, label, gt))
    mious = []
    for tau in grid:
        acc = ConfusionAccumulator(num_classes)
        for best, label, gt in prepared:
            acc.add(np.where(best >= np.float32(tau), label, 0).astype(np.uint8), gt)
        mious.append(miou(acc)[0])
    return mious


def _evaluate_grid_naive(stacks, gts, num_classes, grid):
    """Resolve every image from scratch at every threshold."""
    mious = []
    for tau in grid:
        acc = ConfusionAccumulator(num_classes)
        for score_maps, gt in zip(stacks, gts):
            values, class_ids = stack_scores(score_maps)
            acc.add(label_from_stack(values, class_ids, float(tau)), gt)
        mious.append(miou(acc)[0])
    return mious


def threshold_sweep(
    stacks,
    gts,
    num_classes: int,
    grid=TAU_GRID,
    dr_partitions=None,
    naive: bool = False,
) -> SweepResult:
    """Pick the background threshold maximizing mIoU of the basic
    resolve over ``grid`` (ties to the smallest threshold) and report
    the full metrics at that threshold.

    ``stacks`` is one list of normalized score maps per image, ``gts``
    the matching ground-truth masks, ``dr_partitions`` (optional) one
    partition dict per image for DR/NDR recall in the final report.
    """
    stacks = list(stacks)
    gts = [np.asarray(g) for g in gts]
    if not stacks or len(stacks) != len(gts):
        raise ConfigError(
            f"need matching nonempty stacks and ground truths, got {len(stacks)} and {len(gts)}"
        )
    grid = tuple(float(t) for t in grid)
    if not grid:
        raise ConfigError("threshold grid is empty")
    if dr_partitions is not None and len(dr_partitions) != len(stacks):
        raise ConfigError("need one partition dict per image")

    evaluate = _evaluate_grid_naive if naive else _evaluate_grid_fast
    mious = evaluate(stacks, gts, num_classes, grid)

    best_index = int(np.argmax(mious))  # first max -> smallest tau
    tau_star = grid[best_index]

    acc = ConfusionAccumulator(num_classes)
    for i, (score_maps, gt) in enumerate(zip(stacks, gts)):
        values, class_ids = stack_scores(score_maps)
        pred = label_from_stack(values, class_ids, tau_star)
        acc.add(pred, gt, dr_partitions[i] if dr_partitions is not None else None)
    return SweepResult(
        tau_star=tau_star,
        report=build_report(acc, tau_star),
        taus=grid,
        mious=tuple(mious),
    )
