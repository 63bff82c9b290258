"""
Fusion Filter Sampling module for boxboost
Object-level filtering of box-annotated samples and pixel-level pseudo-label fusion
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import BoxBoostError, ConfigError, require_range
from mask_core import (
    BinaryMask,
    Label,
    ProbMap,
    TriLabelMask,
    require_same_size,
    binarize,
    dice,
    rasterize_boxes,
)

logger = logging.getLogger(__name__)


class FilterReason(str, Enum):
    KEPT = "KEPT"
    LOW_DICE = "LOW_DICE"
    EMPTY_ANNOTATION = "EMPTY_ANNOTATION"


@dataclass(frozen=True)
class FilterDecision:
    """Outcome of the object-level filter for one sample"""

    dice_score: float
    kept: bool
    reason: FilterReason


@dataclass(frozen=True)
class FfsConfig:
    """Thresholds for the object filter and for binarizing predictions"""

    dice_threshold: float = 0.7
    binarize_threshold: float = 0.5

    def __post_init__(self):
        require_range("dice_threshold", self.dice_threshold, 0.0, 1.0)
        require_range("binarize_threshold", self.binarize_threshold, 0.0, 1.0)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "FfsConfig":
        unknown = set(data) - {"dice_threshold", "binarize_threshold"}
        if unknown:
            raise ConfigError(f"Unknown FFS config keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class FfsItemResult:
    """Per-item FFS output; error is set when the item could not be processed"""

    index: int
    decision: Optional[FilterDecision]
    pseudo: Optional[TriLabelMask]
    error: Optional[str] = None


def clears_threshold(dice_score: float, cfg: FfsConfig = FfsConfig()) -> bool:
    """True when a Dice score is strictly above the filter threshold"""
    return dice_score > cfg.dice_threshold


def object_filter(b: BinaryMask, p: BinaryMask, cfg: FfsConfig = FfsConfig()) -> FilterDecision:
    """Keep a sample only when its box mask and prediction agree (Dice strictly above threshold)"""
    d = dice(b, p)
    if b.is_empty():
        return FilterDecision(d, False, FilterReason.EMPTY_ANNOTATION)
    if clears_threshold(d, cfg):
        return FilterDecision(d, True, FilterReason.KEPT)
    return FilterDecision(d, False, FilterReason.LOW_DICE)


def pixel_fusion(b: BinaryMask, p: BinaryMask) -> TriLabelMask:
    """FG where box and prediction both say 1, BG where both say 0, UNCERTAIN elsewhere"""
    require_same_size(b, p)
    labels = np.full(b.size.shape, Label.UNCERTAIN, dtype=np.uint8)
    labels[b.bits & p.bits] = Label.FG
    labels[~b.bits & ~p.bits] = Label.BG
    return TriLabelMask(labels)


def _process(index: int, b: BinaryMask, p: ProbMap, cfg: FfsConfig) -> FfsItemResult:
    try:
        predicted = binarize(p, cfg.binarize_threshold)
        decision = object_filter(b, predicted, cfg)
        pseudo = pixel_fusion(b, predicted) if decision.kept else None
        logger.debug(f"item {index}: dice={decision.dice_score:.4f} {decision.reason.value}")
        return FfsItemResult(index, decision, pseudo)
    except BoxBoostError as e:
        logger.warning(f"FFS item {index} failed: {e.message}")
        return FfsItemResult(index, None, None, e.message)


def ffs_corpus(pairs: Sequence[Tuple[BinaryMask, ProbMap]],
               cfg: FfsConfig = FfsConfig(),
               workers: int = 1) -> List[FfsItemResult]:
    """
    Run FFS over a corpus of (box mask, probability map) pairs

    Args:
        pairs: Box masks with the baseline's probability maps
        cfg: Filter and binarization thresholds
        workers: Thread count; results always come back in input order

    Returns:
        One FfsItemResult per pair; rejected items carry no pseudo label
    """
    if workers <= 1 or len(pairs) < 2:
        return [_process(i, b, p, cfg) for i, (b, p) in enumerate(pairs)]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda args: _process(args[0], *args[1], cfg), enumerate(pairs)))


def keep_rate(results: Sequence[FfsItemResult]) -> float:
    """Share of decided items that were kept; failed items do not count"""
    decided = [r for r in results if r.decision is not None]
    if not decided:
        return 0.0
    return sum(r.decision.kept for r in decided) / len(decided)


def keep_rate_by_mode(modes: Sequence[str], results: Sequence[FfsItemResult]) -> Dict[str, Dict[str, float]]:
    """
    Kept/rejected counts per noise mode

    Args:
        modes: Noise mode of each item, aligned with results (bookkeeping only)
        results: Output of ffs_corpus

    Returns:
        {mode: {"kept", "rejected", "failed", "keep_rate"}} in first-seen mode order
    """
    table = {}
    for mode, result in zip(modes, results):
        row = table.setdefault(mode, {"kept": 0, "rejected": 0, "failed": 0})
        if result.decision is None:
            row["failed"] += 1
        elif result.decision.kept:
            row["kept"] += 1
        else:
            row["rejected"] += 1
    for row in table.values():
        decided = row["kept"] + row["rejected"]
        row["keep_rate"] = row["kept"] / decided if decided else 0.0
    return table


def noise_rejection_audit(manifest, cfg: FfsConfig = FfsConfig()) -> Dict[str, Dict[str, float]]:
    """
    Run the object filter with the hidden ground truth standing in for the prediction

    Measures how well the filter separates noisy box annotations when the prediction is
    perfect, which is a property of the corpus geometry rather than of any model.
    """
    from dataset import Split, read_mask

    modes, results = [], []
    for index, record in enumerate(manifest.split(Split.TRAIN_BOX)):
        try:
            gt = read_mask(manifest.resolve(record.gt))
            b = rasterize_boxes(record.boxes, gt.size)
            results.append(FfsItemResult(index, object_filter(b, gt, cfg), None))
        except BoxBoostError as e:
            logger.warning(f"Audit of {record.id} failed: {e.message}")
            results.append(FfsItemResult(index, None, None, e.message))
        modes.append(record.noise.value)
    table = keep_rate_by_mode(modes, results)
    logger.info("Oracle filter audit: " + ", ".join(f"{m}={r['keep_rate']:.2f}" for m, r in table.items()))
    return table
