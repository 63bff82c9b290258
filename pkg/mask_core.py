"""
Mask core module for boxboost
Mask data types, box rasterization, binary set algebra and overlap metrics
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional

import numpy as np
from scipy import ndimage

from errors import InvalidAnnotationError, ShapeError, require_range

DEFAULT_BINARIZE_THRESHOLD = 0.5


class Label(IntEnum):
    """Tri-label codes, identical to their PGM gray levels"""

    BG = 0
    UNCERTAIN = 128
    FG = 255


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ImageSize:
    """Image height and width in pixels"""

    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise ShapeError(f"Image size must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @property
    def pixels(self) -> int:
        return self.height * self.width

    @classmethod
    def of(cls, array: np.ndarray) -> "ImageSize":
        return cls(int(array.shape[-2]), int(array.shape[-1]))

    def __str__(self) -> str:
        return f"{self.height}x{self.width}"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box covering [x0, x1) x [y0, y1)"""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def fits(self, size: ImageSize) -> bool:
        return 0 <= self.x0 < self.x1 <= size.width and 0 <= self.y0 < self.y1 <= size.height

    def validate(self, size: ImageSize):
        """Raise InvalidAnnotationError when the box does not fit the image"""
        if not self.fits(size):
            raise InvalidAnnotationError(f"Box {self.to_list()} does not fit image {size}")

    def to_list(self) -> List[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, values) -> "Box":
        if len(values) != 4:
            raise InvalidAnnotationError(f"Box needs 4 coordinates, got {list(values)}")
        try:
            coords = [int(v) for v in values]
        except (TypeError, ValueError):
            raise InvalidAnnotationError(f"Box coordinates must be integers, got {list(values)}")
        if any(c != v for c, v in zip(coords, values)):
            raise InvalidAnnotationError(f"Box coordinates must be integers, got {list(values)}")
        return cls(*coords)


class BinaryMask:
    """H x W boolean grid (immutable)"""

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ShapeError(f"Binary mask must be 2-D, got shape {bits.shape}")
        if bits.dtype != bool:
            if not np.isin(bits, (0, 1)).all():
                raise ShapeError("Binary mask cells must be 0 or 1")
            bits = bits.astype(bool)
        object.__setattr__(self, "bits", _frozen(bits))
        ImageSize.of(self.bits)

    @property
    def size(self) -> ImageSize:
        return ImageSize.of(self.bits)

    def count(self) -> int:
        """Number of foreground pixels"""
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        """True when no pixel is set"""
        return not self.bits.any()

    @classmethod
    def zeros(cls, size: ImageSize) -> "BinaryMask":
        return cls(np.zeros(size.shape, dtype=bool))

    @classmethod
    def ones(cls, size: ImageSize) -> "BinaryMask":
        return cls(np.ones(size.shape, dtype=bool))

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.size}, ones={self.count()})"


class ProbMap:
    """H x W foreground probabilities in [0, 1] (immutable)"""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"Probability map must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0:
            raise ShapeError("Probability map values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def size(self) -> ImageSize:
        return ImageSize.of(self.values)

    def __repr__(self) -> str:
        return f"ProbMap({self.size})"


class TriLabelMask:
    """H x W pseudo label with one of FG, BG, UNCERTAIN per pixel"""

    __slots__ = ("labels",)

    def __init__(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ShapeError(f"Tri-label mask must be 2-D, got shape {labels.shape}")
        if not np.isin(labels, [int(code) for code in Label]).all():
            raise ShapeError("Tri-label mask cells must be 0 (BG), 128 (UNCERTAIN) or 255 (FG)")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def size(self) -> ImageSize:
        return ImageSize.of(self.labels)

    @property
    def fg(self) -> BinaryMask:
        return BinaryMask(self.labels == Label.FG)

    @property
    def bg(self) -> BinaryMask:
        return BinaryMask(self.labels == Label.BG)

    @property
    def uncertain(self) -> BinaryMask:
        return BinaryMask(self.labels == Label.UNCERTAIN)

    def counts(self) -> dict:
        return {label.name: int(np.count_nonzero(self.labels == label)) for label in Label}

    @classmethod
    def from_binary(cls, mask: BinaryMask) -> "TriLabelMask":
        """Fully labeled mask: FG where set, BG elsewhere"""
        return cls(np.where(mask.bits, Label.FG, Label.BG).astype(np.uint8))

    def __eq__(self, other) -> bool:
        return isinstance(other, TriLabelMask) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.labels.shape, self.labels.tobytes()))

    def __repr__(self) -> str:
        return f"TriLabelMask({self.size}, {self.counts()})"


def require_same_size(*masks):
    shapes = {m.size.shape for m in masks}
    if len(shapes) != 1:
        raise ShapeError(f"Mask sizes differ: {sorted(shapes)}")


def rasterize_boxes(boxes: List[Box], size: ImageSize) -> BinaryMask:
    """Union of the boxes as a binary mask"""
    bits = np.zeros(size.shape, dtype=bool)
    for box in boxes:
        box.validate(size)
        bits[box.y0:box.y1, box.x0:box.x1] = True
    return BinaryMask(bits)


def binarize(p: ProbMap, threshold: float = DEFAULT_BINARIZE_THRESHOLD) -> BinaryMask:
    """Foreground where the probability is strictly above threshold"""
    require_range("threshold", threshold, 0.0, 1.0)
    return BinaryMask(p.values > threshold)


def dice(b: BinaryMask, p: BinaryMask) -> float:
    """2|b & p| / (|b| + |p|); two empty masks agree perfectly"""
    require_same_size(b, p)
    total = b.count() + p.count()
    if total == 0:
        return 1.0
    overlap = int(np.count_nonzero(b.bits & p.bits))
    return 2.0 * overlap / total


def iou(b: BinaryMask, p: BinaryMask) -> float:
    """|b & p| / |b | p|; two empty masks agree perfectly"""
    require_same_size(b, p)
    union_count = int(np.count_nonzero(b.bits | p.bits))
    if union_count == 0:
        return 1.0
    return int(np.count_nonzero(b.bits & p.bits)) / union_count


def intersect(*masks: BinaryMask) -> BinaryMask:
    """Pixels set in every mask"""
    require_same_size(*masks)
    return BinaryMask(np.logical_and.reduce([m.bits for m in masks]))


def union(*masks: BinaryMask) -> BinaryMask:
    """Pixels set in any mask"""
    require_same_size(*masks)
    return BinaryMask(np.logical_or.reduce([m.bits for m in masks]))


def complement(mask: BinaryMask) -> BinaryMask:
    """Pixels not set in the mask"""
    return BinaryMask(~mask.bits)


def bbox_of(mask: BinaryMask) -> Optional[Box]:
    """Tightest half-open box around the mask, None when empty"""
    if mask.is_empty():
        return None
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def component_boxes(mask: BinaryMask) -> List[Box]:
    """One tight box per 4-connected component, in row-major discovery order"""
    labeled, _ = ndimage.label(mask.bits)
    boxes = []
    for rows, cols in ndimage.find_objects(labeled):
        boxes.append(Box(cols.start, rows.start, cols.stop, rows.stop))
    return boxes
