"""
Dataset module for boxboost
Corpus manifests, image/mask/pseudo-label IO and the synthetic corpus generator
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import BoxBoostError, ConfigError, DataIOError, ParameterError, ParseError
from mask_core import (
    BinaryMask,
    Box,
    ImageSize,
    Label,
    ProbMap,
    TriLabelMask,
    bbox_of,
    dice,
    rasterize_boxes,
)
import pgm

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
MANIFEST_NAME = "manifest.jsonl"


class AnnotationKind(str, Enum):
    MASK = "mask"
    BOX = "box"


class Split(str, Enum):
    TRAIN_MASK = "train_mask"
    TRAIN_BOX = "train_box"
    TEST = "test"


class NoiseMode(str, Enum):
    CLEAN = "clean"
    BLUR = "blur"
    NO_POLYP = "no_polyp"
    WRONG_LABEL = "wrong_label"
    IMPRECISE_BOX = "imprecise_box"


NOISY_MODES = (NoiseMode.BLUR, NoiseMode.NO_POLYP, NoiseMode.WRONG_LABEL, NoiseMode.IMPRECISE_BOX)


# ==================== MANIFEST ====================

@dataclass
class ManifestRecord:
    """One image of the corpus; paths are relative to the manifest's directory"""

    id: str
    image: str
    annotation: AnnotationKind
    split: Split
    gt: str
    noise: NoiseMode = NoiseMode.CLEAN
    mask: Optional[str] = None
    boxes: Optional[List[Box]] = None
    dataset: str = "synthetic"

    def __post_init__(self):
        self.annotation = AnnotationKind(self.annotation)
        self.split = Split(self.split)
        self.noise = NoiseMode(self.noise)
        if self.annotation == AnnotationKind.MASK and not self.mask:
            raise ValueError(f"record {self.id}: mask annotation needs a mask path")
        if self.annotation == AnnotationKind.BOX:
            if self.boxes is None:
                raise ValueError(f"record {self.id}: box annotation needs a box list")
            if self.mask is not None:
                raise ValueError(f"record {self.id}: box records carry no mask annotation")
        if self.split == Split.TRAIN_BOX and self.annotation != AnnotationKind.BOX:
            raise ValueError(f"record {self.id}: train_box records must be box-annotated")
        if self.split != Split.TRAIN_BOX and self.annotation != AnnotationKind.MASK:
            raise ValueError(f"record {self.id}: only train_box records may be box-annotated")

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "dataset": self.dataset,
            "split": self.split.value,
            "annotation": self.annotation.value,
            "noise": self.noise.value,
            "image": self.image,
            "mask": self.mask,
            "boxes": [box.to_list() for box in self.boxes] if self.boxes is not None else None,
            "gt": self.gt,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ManifestRecord":
        known = {"id", "dataset", "split", "annotation", "noise", "image", "mask", "boxes", "gt"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        fields = dict(data)
        if fields.get("boxes") is not None:
            fields["boxes"] = [Box.from_list(b) for b in fields["boxes"]]
        for key in ("id", "image", "split", "annotation", "gt"):
            if key not in fields:
                raise ValueError(f"missing field '{key}'")
        return cls(**fields)


@dataclass
class CorpusManifest:
    """Ordered records plus the directory their relative paths resolve against"""

    records: List[ManifestRecord]
    root: str = "."

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise ParseError(f"Duplicate record id '{record.id}'")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def split(self, split: Split) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == Split(split)]

    def by_id(self, record_id: str) -> ManifestRecord:
        for record in self.records:
            if record.id == record_id:
                return record
        raise DataIOError(f"No record with id '{record_id}' in manifest")

    def resolve(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def datasets(self, split: Split = Split.TEST) -> List[str]:
        names = []
        for record in self.split(split):
            if record.dataset not in names:
                names.append(record.dataset)
        return names

    def noise_counts(self, split: Split = Split.TRAIN_BOX) -> Dict[str, int]:
        counts = {mode.value: 0 for mode in NoiseMode}
        for record in self.split(split):
            counts[record.noise.value] += 1
        return counts

    def check_files(self):
        """Raise DataIOError for the first referenced file that does not exist"""
        for record in self.records:
            for path in (record.image, record.mask, record.gt):
                if path is not None and not os.path.exists(self.resolve(path)):
                    raise DataIOError(f"record {record.id}: missing file '{self.resolve(path)}'")


def audit_leaks(manifest: CorpusManifest) -> List[str]:
    """Ids of box-split records whose annotation fields point at ground truth"""
    leaks = []
    for record in manifest.split(Split.TRAIN_BOX):
        if record.mask is not None or record.image == record.gt:
            leaks.append(record.id)
    return leaks


def write_manifest(path: PathLike, manifest: CorpusManifest):
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    lines = [json.dumps(record.to_dict(), separators=(", ", ": ")) for record in manifest.records]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("".join(line + "\n" for line in lines))
    except OSError as e:
        raise DataIOError(f"Cannot write manifest '{path}': {e.strerror or e}")


def load_manifest(path: PathLike, check_files: bool = True) -> CorpusManifest:
    """
    Load a JSON-lines manifest

    Raises:
        DataIOError: file (or a referenced file) missing
        ParseError: malformed line, invalid record or duplicate id, with byte offset
    """
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise DataIOError(f"Cannot read manifest '{path}': {e.strerror or e}")

    records = []
    seen = set()
    offset = 0
    for raw_line in data.splitlines(keepends=True):
        line_start = offset
        offset += len(raw_line)
        if not raw_line.strip():
            continue
        try:
            text = raw_line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"{path}: invalid UTF-8", offset=line_start + e.start)
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e.msg}", offset=line_start + len(text[:e.pos].encode("utf-8")))
        if not isinstance(payload, dict):
            raise ParseError(f"{path}: each line must be a JSON object", offset=line_start)
        try:
            record = ManifestRecord.from_dict(payload)
        except (ValueError, TypeError, BoxBoostError) as e:
            message = e.message if isinstance(e, BoxBoostError) else str(e)
            raise ParseError(f"{path}: invalid record: {message}", offset=line_start)
        if record.id in seen:
            raise ParseError(f"{path}: duplicate record id '{record.id}'", offset=line_start)
        seen.add(record.id)
        records.append(record)

    manifest = CorpusManifest(records, root=os.path.dirname(os.path.abspath(path)))
    if check_files:
        manifest.check_files()
    return manifest


# ==================== IMAGE / MASK IO ====================

def _read_8bit(path: PathLike, what: str) -> np.ndarray:
    array, maxval = pgm.read(path)
    if maxval != 255:
        raise ParseError(f"{path}: unsupported depth for {what} (maxval {maxval}, expected 255)")
    return array


def read_image(path: PathLike) -> np.ndarray:
    """8-bit grayscale image as floats in [0, 1]"""
    return _read_8bit(path, "image").astype(np.float64) / 255.0


def write_image(path: PathLike, image: np.ndarray):
    pgm.write(path, np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))


def read_mask(path: PathLike) -> BinaryMask:
    array = _read_8bit(path, "mask")
    if not np.isin(array, (0, 255)).all():
        raise ParseError(f"{path}: mask pixels must be 0 or 255")
    return BinaryMask(array == 255)


def write_mask(path: PathLike, mask: BinaryMask):
    pgm.write(path, np.where(mask.bits, 255, 0).astype(np.uint8))


def read_trilabel(path: PathLike) -> TriLabelMask:
    array = _read_8bit(path, "pseudo label")
    if not np.isin(array, [int(code) for code in Label]).all():
        raise ParseError(f"{path}: pseudo-label pixels must be 0, 128 or 255")
    return TriLabelMask(array)


def write_trilabel(path: PathLike, pseudo: TriLabelMask):
    pgm.write(path, pseudo.labels)


def read_probmap(path: PathLike) -> ProbMap:
    """Probability map stored as fixed point: value / maxval"""
    array, maxval = pgm.read(path)
    return ProbMap(array.astype(np.float64) / maxval)


def write_probmap(path: PathLike, p: ProbMap):
    pgm.write(path, np.round(p.values * 65535.0).astype(np.uint16), maxval=65535)


def record_boxes_mask(record: ManifestRecord, size: ImageSize) -> BinaryMask:
    return rasterize_boxes(record.boxes or [], size)


# ==================== SYNTHETIC CORPUS ====================

@dataclass
class CorpusSpec:
    """
    Sizes per split, noise fractions for the box split and the generator seed

    Noise fractions are given for the four noisy modes; CLEAN takes the remainder.
    """

    n_mask: int = 60
    n_box: int = 400
    test_sets: Dict[str, int] = field(default_factory=lambda: {"synth-standard": 60, "synth-lowcontrast": 40})
    size: int = 64
    blur: float = 0.1
    no_polyp: float = 0.1
    wrong_label: float = 0.15
    imprecise_box: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name in ("blur", "no_polyp", "wrong_label", "imprecise_box"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"Noise fraction {name} must be in [0, 1], got {value}")
        if self.noise_total() > 1.0 + 1e-12:
            raise ParameterError(f"Noise fractions sum to {self.noise_total():.4f} > 1")
        if self.n_mask < 0 or self.n_box < 0 or any(n < 0 for n in self.test_sets.values()):
            raise ParameterError("Split sizes must be non-negative")
        if self.size < 32:
            raise ParameterError(f"Image size must be at least 32, got {self.size}")
        # both architectures downsample by up to 4
        if self.size % 4:
            raise ParameterError(f"Image size must be a multiple of 4, got {self.size}")

    def noise_total(self) -> float:
        return self.blur + self.no_polyp + self.wrong_label + self.imprecise_box

    def noise_counts(self) -> Dict[NoiseMode, int]:
        counts = {mode: int(np.floor(getattr(self, mode.value) * self.n_box + 0.5)) for mode in NOISY_MODES}
        noisy = sum(counts.values())
        if noisy > self.n_box:
            raise ParameterError(f"Noise fractions round to {noisy} records, more than {self.n_box}")
        counts[NoiseMode.CLEAN] = self.n_box - noisy
        return counts

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "CorpusSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown corpus spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Frame:
    image: np.ndarray
    gt: np.ndarray
    boxes: List[Box]


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=6.0)
    coarse /= np.abs(coarse).max() + 1e-12
    fine = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.0)
    return 0.35 + 0.08 * coarse + 0.04 * fine


def _polyp_mask(size: int, cy: float, cx: float, a: float, b: float, angle: float,
                amplitude: float, lobes: int, phase: float) -> Tuple[np.ndarray, np.ndarray]:
    """Ellipse with a sinusoidal boundary; returns (mask, normalized radius)"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / a
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / b
    radius = np.sqrt(u ** 2 + v ** 2)
    boundary = 1.0 + amplitude * np.sin(lobes * np.arctan2(v, u) + phase)
    return radius <= boundary, radius / boundary


def _overlaps(box: Box, others: List[Box], gap: int = 2) -> bool:
    for other in others:
        if (box.x0 < other.x1 + gap and other.x0 < box.x1 + gap
                and box.y0 < other.y1 + gap and other.y0 < box.y1 + gap):
            return True
    return False


def render_frame(rng: np.random.Generator, size: int, n_polyps: int, contrast: Tuple[float, float]) -> Frame:
    """Textured background with small specular distractors and n_polyps non-overlapping polyps"""
    image = _texture(rng, size)
    for _ in range(int(rng.integers(0, 3))):
        spot, _ = _polyp_mask(size, rng.uniform(2, size - 2), rng.uniform(2, size - 2),
                              rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5), 0.0, 0.0, 1, 0.0)
        image[spot] += rng.uniform(0.25, 0.4)

    gt = np.zeros((size, size), dtype=bool)
    boxes = []
    for _ in range(n_polyps):
        for _attempt in range(50):
            a = rng.uniform(6.0, 12.0)
            b = a * rng.uniform(0.75, 1.0)
            reach = a * 1.1 + 1.0
            cy = rng.uniform(reach, size - reach)
            cx = rng.uniform(reach, size - reach)
            mask, radius = _polyp_mask(size, cy, cx, a, b, rng.uniform(0, np.pi),
                                       rng.uniform(0.03, 0.08), int(rng.integers(3, 6)),
                                       rng.uniform(0, 2 * np.pi))
            box = bbox_of(BinaryMask(mask))
            if box is None or _overlaps(box, boxes):
                continue
            strength = rng.uniform(*contrast)
            image[mask] += strength * (1.0 - 0.5 * radius[mask] ** 2)
            gt |= mask
            boxes.append(box)
            break
    return Frame(np.clip(image, 0.0, 1.0), gt, boxes)


def _random_box(rng: np.random.Generator, size: int) -> Box:
    w, h = (int(v) for v in rng.integers(10, 25, size=2))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    return Box(x0, y0, x0 + w, y0 + h)


def _jitter(rng: np.random.Generator, box: Box, size: int) -> Box:
    """Move each edge by 10-40% of the box side, in a random direction"""
    def shift(side: int) -> int:
        return int(round(rng.choice((-1, 1)) * rng.uniform(0.1, 0.4) * side))

    x0 = min(max(box.x0 + shift(box.width), 0), size - 1)
    x1 = min(max(box.x1 + shift(box.width), x0 + 1), size)
    y0 = min(max(box.y0 + shift(box.height), 0), size - 1)
    y1 = min(max(box.y1 + shift(box.height), y0 + 1), size)
    return Box(x0, y0, x1, y1)


def _donor_boxes(rng: np.random.Generator, index: int, frames: List[Frame], size: int) -> List[Box]:
    """Boxes of another frame that clearly disagree with this frame's objects"""
    own = BinaryMask(frames[index].gt)
    for _ in range(20):
        donor = int(rng.integers(len(frames)))
        if donor == index or not frames[donor].boxes:
            continue
        candidate = frames[donor].boxes
        if dice(rasterize_boxes(candidate, ImageSize(size, size)), own) < 0.5:
            return list(candidate)
    return [_random_box(rng, size)]


def generate_corpus(spec: CorpusSpec, out_dir: PathLike) -> CorpusManifest:
    """
    Render a synthetic corpus to out_dir and write its manifest

    Mask-split and test records get exact masks; box-split records get tight boxes with
    the requested noise modes applied. Hidden ground truth is stored for every record.
    """
    counts = spec.noise_counts()
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    out_dir = os.fspath(out_dir)
    records = []

    def save(record_id: str, frame: Frame):
        write_image(os.path.join(out_dir, "images", f"{record_id}.pgm"), frame.image)
        write_mask(os.path.join(out_dir, "gt", f"{record_id}.pgm"), BinaryMask(frame.gt))

    standard = (0.25, 0.4)
    for i in range(spec.n_mask):
        record_id = f"mask-{i:04d}"
        frame = render_frame(rng, size, int(rng.integers(1, 4)), standard)
        save(record_id, frame)
        write_mask(os.path.join(out_dir, "masks", f"{record_id}.pgm"), BinaryMask(frame.gt))
        records.append(ManifestRecord(record_id, f"images/{record_id}.pgm", AnnotationKind.MASK,
                                      Split.TRAIN_MASK, f"gt/{record_id}.pgm",
                                      mask=f"masks/{record_id}.pgm"))

    modes = []
    for mode in (NoiseMode.CLEAN,) + NOISY_MODES:
        modes += [mode] * counts[mode]
    modes = [modes[i] for i in rng.permutation(len(modes))]

    frames = []
    for mode in modes:
        n_polyps = 0 if mode == NoiseMode.NO_POLYP else int(rng.integers(1, 4))
        frames.append(render_frame(rng, size, n_polyps, standard))

    for i, (mode, frame) in enumerate(zip(modes, frames)):
        record_id = f"box-{i:04d}"
        image, boxes = frame.image, list(frame.boxes)
        if mode == NoiseMode.BLUR:
            image = ndimage.gaussian_filter(image, sigma=rng.uniform(1.5, 2.5))
        elif mode == NoiseMode.NO_POLYP:
            boxes = [_random_box(rng, size)]
        elif mode == NoiseMode.WRONG_LABEL:
            boxes = _donor_boxes(rng, i, frames, size)
        elif mode == NoiseMode.IMPRECISE_BOX:
            boxes = [_jitter(rng, box, size) for box in boxes]
        save(record_id, Frame(image, frame.gt, boxes))
        records.append(ManifestRecord(record_id, f"images/{record_id}.pgm", AnnotationKind.BOX,
                                      Split.TRAIN_BOX, f"gt/{record_id}.pgm", noise=mode,
                                      boxes=boxes))

    for name, count in spec.test_sets.items():
        contrast = (0.12, 0.22) if "lowcontrast" in name else standard
        for i in range(count):
            record_id = f"{name}-{i:04d}"
            frame = render_frame(rng, size, int(rng.integers(1, 4)), contrast)
            save(record_id, frame)
            records.append(ManifestRecord(record_id, f"images/{record_id}.pgm", AnnotationKind.MASK,
                                          Split.TEST, f"gt/{record_id}.pgm",
                                          mask=f"gt/{record_id}.pgm", dataset=name))

    manifest = CorpusManifest(records, root=out_dir)
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), manifest)
    logger.info(
        f"Generated corpus in {out_dir}: {spec.n_mask} mask, {spec.n_box} box, "
        f"{sum(spec.test_sets.values())} test records; noise {manifest.noise_counts()}"
    )
    return manifest
