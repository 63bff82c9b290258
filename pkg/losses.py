"""
Loss module for boxboost
Region-masked BCE and Dice losses, the image-consistency loss and their sum,
each returned with analytic gradients
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from errors import NumericalError, ShapeError
from mask_core import BinaryMask, ImageSize, ProbMap, TriLabelMask

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0


class RegionMask:
    """H x W binary weights selecting the pixels a loss term looks at"""

    __slots__ = ("weights",)

    def __init__(self, weights):
        weights = np.asarray(weights)
        if weights.ndim != 2:
            raise ShapeError(f"Region mask must be 2-D, got shape {weights.shape}")
        if not np.isin(weights, (0, 1)).all():
            raise ShapeError("Region mask weights must be 0 or 1")
        weights = weights.astype(np.float64)
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> ImageSize:
        return ImageSize.of(self.weights)

    @property
    def active(self) -> int:
        return int(self.weights.sum())

    @classmethod
    def full(cls, size: ImageSize) -> "RegionMask":
        return cls(np.ones(size.shape))

    @classmethod
    def from_mask(cls, mask: BinaryMask) -> "RegionMask":
        return cls(mask.bits)


class FeatureMap:
    """C x H x W finite real tensor"""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ShapeError(f"Feature map must be C x H x W, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise NumericalError("Feature map contains NaN or Inf")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> ImageSize:
        return ImageSize.of(self.values)


@dataclass
class LossResult:
    """Loss value with one gradient array per differentiable input"""

    value: float
    gradients: Dict[str, np.ndarray]
    terms: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericalError(f"Loss is not finite: {self.value}")


def _check(size: ImageSize, *others):
    for other in others:
        if other.size != size:
            raise ShapeError(f"Expected size {size}, got {other.size}")


def bce_loss(pred: ProbMap, target: BinaryMask, region: RegionMask) -> LossResult:
    """Mean binary cross entropy over the active pixels; gradient w.r.t. pred"""
    _check(pred.size, target, region)
    w = region.weights
    n = w.sum()
    if n == 0:
        return LossResult(0.0, {"pred": np.zeros(pred.size.shape)})

    p = pred.values
    t = target.bits.astype(np.float64)
    clipped = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = -(t * np.log(clipped) + (1.0 - t) * np.log(1.0 - clipped))
    value = float((per_pixel * w).sum() / n)

    # clamping is flat outside [eps, 1 - eps]
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
    grad = -(t / clipped - (1.0 - t) / (1.0 - clipped)) * w * inside / n
    return LossResult(value, {"pred": grad})


def dice_loss(pred: ProbMap, target: BinaryMask, region: RegionMask) -> LossResult:
    """Smoothed soft Dice loss over the active pixels; gradient w.r.t. pred"""
    _check(pred.size, target, region)
    w = region.weights
    if w.sum() == 0:
        return LossResult(0.0, {"pred": np.zeros(pred.size.shape)})

    p = pred.values * w
    t = target.bits.astype(np.float64) * w
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + DICE_SMOOTH
    numer = 2.0 * inter + DICE_SMOOTH
    value = float(1.0 - numer / denom)
    grad = -(2.0 * t * denom - numer) / denom ** 2 * w
    return LossResult(value, {"pred": grad})


def ic_loss(f_r: FeatureMap, f_p: FeatureMap, u: RegionMask) -> LossResult:
    """
    Image-consistency loss: squared feature difference on the uncertain region,
    normalized by the region size and the channel count

    Gradients flow to both feature maps.
    """
    if f_r.values.shape != f_p.values.shape:
        raise ShapeError(f"Feature shapes differ: {f_r.values.shape} vs {f_p.values.shape}")
    _check(f_r.size, u)
    w = u.weights
    n = w.sum()
    shape = f_r.values.shape
    if n == 0:
        return LossResult(0.0, {"f_r": np.zeros(shape), "f_p": np.zeros(shape)})

    scale = f_r.channels * n
    diff = f_r.values - f_p.values
    value = float((diff ** 2 * w).sum() / scale)
    grad_r = 2.0 * diff * w / scale
    return LossResult(value, {"f_r": grad_r, "f_p": -grad_r})


def certain_region(pseudo: TriLabelMask) -> RegionMask:
    return RegionMask(~pseudo.uncertain.bits)


def uncertain_region(pseudo: TriLabelMask) -> RegionMask:
    return RegionMask(pseudo.uncertain.bits)


def supervised_loss(pred: ProbMap, pseudo: TriLabelMask) -> LossResult:
    """BCE + Dice on the certain pixels of one prediction"""
    region = certain_region(pseudo)
    target = pseudo.fg
    bce = bce_loss(pred, target, region)
    dsc = dice_loss(pred, target, region)
    return LossResult(
        bce.value + dsc.value,
        {"pred": bce.gradients["pred"] + dsc.gradients["pred"]},
        {"bce": bce.value, "dice": dsc.value},
    )


def total_loss(pred_r: ProbMap, pred_p: ProbMap,
               f_r: FeatureMap, f_p: FeatureMap,
               pseudo: TriLabelMask,
               use_ic: bool = True,
               u: Optional[RegionMask] = None) -> LossResult:
    """
    Sum of supervised terms for both networks and the IC term

    Args:
        pred_r, pred_p: Probability maps of the two networks
        f_r, f_p: Feature maps compared by the IC term
        pseudo: Tri-label pseudo mask; FG is the target, FG and BG form the certain region
        use_ic: Include the IC term (the ablation switch)
        u: Override for the IC region, defaults to the UNCERTAIN pixels of pseudo

    Returns:
        LossResult with gradients pred_r, pred_p, f_r, f_p and the five terms
    """
    _check(pseudo.size, pred_r, pred_p, f_r, f_p)
    sup_r = supervised_loss(pred_r, pseudo)
    sup_p = supervised_loss(pred_p, pseudo)
    shape = f_r.values.shape
    if use_ic:
        ic = ic_loss(f_r, f_p, u if u is not None else uncertain_region(pseudo))
    else:
        ic = LossResult(0.0, {"f_r": np.zeros(shape), "f_p": np.zeros(shape)})

    terms = {
        "bce_r": sup_r.terms["bce"],
        "dice_r": sup_r.terms["dice"],
        "bce_p": sup_p.terms["bce"],
        "dice_p": sup_p.terms["dice"],
        "ic": ic.value,
    }
    value = terms["bce_r"] + terms["dice_r"] + terms["bce_p"] + terms["dice_p"] + terms["ic"]
    gradients = {
        "pred_r": sup_r.gradients["pred"],
        "pred_p": sup_p.gradients["pred"],
        "f_r": ic.gradients["f_r"],
        "f_p": ic.gradients["f_p"],
    }
    return LossResult(value, gradients, terms)
