"""
Augmentation module for boxboost
Random flip, 90-degree rotation and multi-scale resampling applied identically to an image
and its label
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import ShapeError
from mask_core import BinaryMask, TriLabelMask

FLIPS = ("none", "h", "v")
ROTATIONS = (0, 90, 180, 270)
SCALES = (0.75, 1.0, 1.25)

Label = Union[np.ndarray, BinaryMask, TriLabelMask]


@dataclass(frozen=True)
class Transform:
    flip: str = "none"
    rotation: int = 0
    scale: float = 1.0


def draw_transform(rng: np.random.Generator, scale: Optional[float] = None,
                   scales: Sequence[float] = SCALES) -> Transform:
    flip = FLIPS[rng.integers(len(FLIPS))]
    rotation = ROTATIONS[rng.integers(len(ROTATIONS))]
    if scale is None:
        scale = scales[rng.integers(len(scales))]
    return Transform(flip, rotation, float(scale))


def scaled_size(height: int, width: int, scale: float, multiple: int = 1) -> Tuple[int, int]:
    """Resampled size rounded to a multiple of the network downsampling factor"""
    new_h = max(multiple, int(round(height * scale / multiple)) * multiple)
    new_w = max(multiple, int(round(width * scale / multiple)) * multiple)
    return new_h, new_w


def _resample(array: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    height, width = array.shape[-2:]
    rows = np.floor((np.arange(size[0]) + 0.5) * height / size[0]).astype(int)
    cols = np.floor((np.arange(size[1]) + 0.5) * width / size[1]).astype(int)
    return array[..., rows[:, None], cols[None, :]]


def apply_transform(array: np.ndarray, transform: Transform, multiple: int = 1) -> np.ndarray:
    """Apply flip, rotation, then nearest-neighbor scaling over the last two axes"""
    out = array
    if transform.flip == "h":
        out = np.flip(out, axis=-1)
    elif transform.flip == "v":
        out = np.flip(out, axis=-2)
    if transform.rotation:
        out = np.rot90(out, k=transform.rotation // 90, axes=(-2, -1))
    if transform.scale != 1.0 or multiple > 1:
        size = scaled_size(out.shape[-2], out.shape[-1], transform.scale, multiple)
        if size != out.shape[-2:]:
            out = _resample(out, size)
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, label: Label, seed, scale: Optional[float] = None,
            multiple: int = 1) -> Tuple[np.ndarray, Label]:
    """
    Apply one random transform to an image and its label

    Args:
        image: H x W or C x H x W array
        label: Mask or pseudo label of the same spatial size
        seed: Seed (or seed sequence) for the transform draw
        scale: Fixed scale, e.g. one shared by a whole batch; drawn when None
        multiple: Output sizes are rounded to this multiple

    Returns:
        (transformed image, transformed label of the same type)
    """
    raw = label
    if isinstance(label, BinaryMask):
        raw = label.bits
    elif isinstance(label, TriLabelMask):
        raw = label.labels
    if np.shape(image)[-2:] != np.shape(raw)[-2:]:
        raise ShapeError(f"Image {np.shape(image)} and label {np.shape(raw)} differ in size")

    transform = draw_transform(np.random.default_rng(seed), scale)
    new_image = apply_transform(np.asarray(image), transform, multiple)
    new_raw = apply_transform(np.asarray(raw), transform, multiple)
    if isinstance(label, BinaryMask):
        return new_image, BinaryMask(new_raw)
    if isinstance(label, TriLabelMask):
        return new_image, TriLabelMask(new_raw)
    return new_image, new_raw
