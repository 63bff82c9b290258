"""
Evaluation module for boxboost
Per-dataset Dice/IoU, image-count weighted averages and threshold sweeps
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import BoxBoostError, DataIOError, ParameterError, require_range
from mask_core import DEFAULT_BINARIZE_THRESHOLD, BinaryMask, ProbMap, binarize, dice, iou, require_same_size

logger = logging.getLogger(__name__)

CURVE_POINTS = 256
WAVG_NAME = "wAVG"


@dataclass(frozen=True)
class DatasetReport:
    """Mean metrics of one test dataset"""

    name: str
    count: int
    dice: float
    iou: float

    def __post_init__(self):
        if self.count < 1:
            raise ParameterError(f"Dataset report '{self.name}' needs at least one image")
        require_range("dice", self.dice, 0.0, 1.0)
        require_range("iou", self.iou, 0.0, 1.0)


@dataclass(frozen=True)
class ItemScore:
    index: int
    dice: Optional[float]
    iou: Optional[float]
    error: Optional[str] = None


@dataclass(frozen=True)
class ThresholdCurve:
    """Mean Dice at each binarization threshold"""

    thresholds: Tuple[float, ...]
    dice: Tuple[float, ...]
    name: str = ""

    def __post_init__(self):
        if len(self.thresholds) != len(self.dice):
            raise ParameterError("Threshold curve needs one Dice value per threshold")
        _check_thresholds(self.thresholds)

    def at(self, threshold: float) -> float:
        index = int(np.argmin(np.abs(np.asarray(self.thresholds) - threshold)))
        return self.dice[index]

    def best(self) -> Tuple[float, float]:
        """(threshold, dice) of the highest point"""
        index = int(np.argmax(self.dice))
        return self.thresholds[index], self.dice[index]


def _check_thresholds(thresholds: Sequence[float]):
    values = np.asarray(thresholds, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("At least one threshold is required")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ParameterError("Thresholds must lie in [0, 1]")
    if np.any(np.diff(values) <= 0):
        raise ParameterError("Thresholds must be strictly ascending")


def round_half_up(value: float, places: int = 3) -> float:
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def _check_aligned(preds: Sequence[ProbMap], gts: Sequence[BinaryMask]):
    if len(preds) == 0:
        raise ParameterError("Cannot evaluate an empty dataset")
    if len(preds) != len(gts):
        raise ParameterError(f"{len(preds)} predictions but {len(gts)} ground-truth masks")


def _score(index: int, pred: ProbMap, gt: BinaryMask, threshold: float) -> ItemScore:
    try:
        predicted = binarize(pred, threshold)
        require_same_size(predicted, gt)
        return ItemScore(index, dice(predicted, gt), iou(predicted, gt))
    except BoxBoostError as e:
        logger.warning(f"Evaluation of item {index} failed: {e.message}")
        return ItemScore(index, None, None, e.message)


def score_items(preds: Sequence[ProbMap], gts: Sequence[BinaryMask],
                threshold: float = DEFAULT_BINARIZE_THRESHOLD, workers: int = 1) -> List[ItemScore]:
    """Per-image Dice and IoU; items that fail carry an error instead of scores"""
    _check_aligned(preds, gts)
    require_range("threshold", threshold, 0.0, 1.0)
    if workers <= 1:
        return [_score(i, p, g, threshold) for i, (p, g) in enumerate(zip(preds, gts))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: _score(i, preds[i], gts[i], threshold), range(len(preds))))


def evaluate_dataset(preds: Sequence[ProbMap], gts: Sequence[BinaryMask],
                     threshold: float = DEFAULT_BINARIZE_THRESHOLD, name: str = "dataset",
                     workers: int = 1) -> DatasetReport:
    """
    Mean Dice and IoU of binarized predictions against ground truth

    Args:
        preds: Probability maps
        gts: Ground-truth masks aligned with preds
        threshold: Binarization threshold (strict >)
        name: Dataset name used in reports
        workers: Thread count for per-image scoring

    Returns:
        DatasetReport over the images that could be scored
    """
    scores = score_items(preds, gts, threshold, workers)
    good = [s for s in scores if s.error is None]
    if not good:
        raise DataIOError(f"No image of dataset '{name}' could be evaluated")
    report = DatasetReport(
        name,
        len(good),
        float(np.mean([s.dice for s in good])),
        float(np.mean([s.iou for s in good])),
    )
    logger.info(f"{name}: n={report.count} dice={report.dice:.4f} iou={report.iou:.4f}")
    return report


def weighted_average(reports: Sequence[DatasetReport]) -> Tuple[float, float]:
    """Image-count weighted mean (dice, iou) across datasets"""
    if not reports:
        raise ParameterError("weighted_average needs at least one report")
    counts = np.array([r.count for r in reports], dtype=np.float64)
    total = counts.sum()
    wavg_dice = float((counts * np.array([r.dice for r in reports])).sum() / total)
    wavg_iou = float((counts * np.array([r.iou for r in reports])).sum() / total)
    return wavg_dice, wavg_iou


def threshold_curve(preds: Sequence[ProbMap], gts: Sequence[BinaryMask],
                    thresholds: Optional[Sequence[float]] = None, name: str = "") -> ThresholdCurve:
    """Mean Dice of the dataset at each threshold; default grid is 256 evenly spaced points"""
    _check_aligned(preds, gts)
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, CURVE_POINTS)
    _check_thresholds(thresholds)

    for pred, gt in zip(preds, gts):
        require_same_size(pred, gt)
    gt_bits = [g.bits for g in gts]
    gt_counts = np.array([g.count() for g in gts], dtype=np.float64)

    values = []
    for t in thresholds:
        scores = np.empty(len(preds))
        for i, (pred, bits) in enumerate(zip(preds, gt_bits)):
            predicted = pred.values > t
            denom = predicted.sum() + gt_counts[i]
            scores[i] = 1.0 if denom == 0 else 2.0 * np.logical_and(predicted, bits).sum() / denom
        values.append(float(scores.mean()))
    return ThresholdCurve(tuple(float(t) for t in thresholds), tuple(values), name)


# ==================== EXPORTS ====================

def reports_to_frame(reports: Sequence[DatasetReport], include_wavg: bool = True) -> pd.DataFrame:
    """One row per dataset plus an optional wAVG row"""
    frame = pd.DataFrame(
        [{"dataset": r.name, "images": r.count, "dice": r.dice, "iou": r.iou} for r in reports],
        columns=["dataset", "images", "dice", "iou"],
    )
    if include_wavg and reports:
        wavg_dice, wavg_iou = weighted_average(reports)
        wavg = pd.DataFrame([{"dataset": WAVG_NAME, "images": int(frame["images"].sum()),
                              "dice": wavg_dice, "iou": wavg_iou}])
        frame = pd.concat([frame, wavg], ignore_index=True)
    return frame


def _ensure_parent(path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_report_csv(path: str, reports: Sequence[DatasetReport]) -> str:
    _ensure_parent(path)
    reports_to_frame(reports).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def write_curve_csv(path: str, curve: ThresholdCurve) -> str:
    _ensure_parent(path)
    frame = pd.DataFrame({"threshold": curve.thresholds, "dice": curve.dice})
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


@dataclass
class Benchmark:
    """Collects dataset reports and curves for one network"""

    network: str
    threshold: float = DEFAULT_BINARIZE_THRESHOLD
    workers: int = 1
    reports: List[DatasetReport] = field(default_factory=list)
    curves: Dict[str, ThresholdCurve] = field(default_factory=dict)

    def add(self, name: str, preds: Sequence[ProbMap], gts: Sequence[BinaryMask],
            with_curve: bool = False) -> DatasetReport:
        report = evaluate_dataset(preds, gts, self.threshold, name, self.workers)
        self.reports.append(report)
        if with_curve:
            self.curves[name] = threshold_curve(preds, gts, name=name)
        return report

    def wavg(self) -> Tuple[float, float]:
        return weighted_average(self.reports)

    def frame(self) -> pd.DataFrame:
        frame = reports_to_frame(self.reports)
        frame.insert(0, "network", self.network)
        return frame

    def summary(self) -> str:
        lines = [f"{'Dataset':<22}{'Images':>8}{'Dice':>10}{'IoU':>10}"]
        for row in reports_to_frame(self.reports).itertuples(index=False):
            lines.append(f"{row.dataset:<22}{row.images:>8}{row.dice:>10.4f}{row.iou:>10.4f}")
        return "\n".join(lines)
