"""
Synthetic shapes segmentation data, on-disk ingestion and augmentation.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import netpbm
from .errors import ConfigurationError, ConsistencyError, LabelError, MissingFileError, ParseError
from .tensor import interpolation_matrix

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
SHAPE_KINDS = ("circle", "rectangle", "triangle", "ellipse", "diamond")
# Base colors for classes 1..5; class 0 is the background.
PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.80, 0.30],
        [0.25, 0.35, 0.90],
        [0.90, 0.85, 0.20],
        [0.80, 0.30, 0.85],
    ]
)


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w), values in [0, 1]
    label: np.ndarray  # (h, w) class ids or IGNORE_INDEX

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ConsistencyError(f"Image must be (3, h, w), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ConsistencyError(
                f"Label size {self.label.shape} differs from image size {self.image.shape[1:]}"
            )

    def check_labels(self, num_classes: int) -> None:
        bad = (self.label != IGNORE_INDEX) & ((self.label < 0) | (self.label >= num_classes))
        if bad.any():
            raise LabelError(f"Label value {int(self.label[bad][0])} outside [0, {num_classes})")


@dataclass
class ShapesSpec:
    canvas: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.05
    color_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.num_classes <= len(PALETTE) + 1:
            raise ConfigurationError(
                f"num_classes must be in [2, {len(PALETTE) + 1}], got {self.num_classes}"
            )
        if self.canvas < 1 or not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError(
                f"Invalid shapes spec: canvas={self.canvas}, shapes {self.min_shapes}..{self.max_shapes}"
            )
        if self.noise < 0 or self.color_jitter < 0:
            raise ConfigurationError("noise and color_jitter must be non-negative")

    def check_divisible(self, multiple: int) -> None:
        if self.canvas % multiple:
            raise ConfigurationError(f"Canvas {self.canvas} is not divisible by {multiple}")


@dataclass(frozen=True)
class Shape:
    kind: str
    class_id: int
    cy: float
    cx: float
    size: float
    aspect: float
    angle: float
    color: Tuple[float, float, float]

    def mask(self, height: int, width: int) -> np.ndarray:
        """Membership of every pixel centre in the shape."""
        yy, xx = np.mgrid[0:height, 0:width] + 0.5
        dy, dx = yy - self.cy, xx - self.cx
        cos, sin = np.cos(self.angle), np.sin(self.angle)
        u = dx * cos + dy * sin
        v = -dx * sin + dy * cos
        if self.kind == "circle":
            return dy * dy + dx * dx <= self.size * self.size
        if self.kind == "rectangle":
            return (np.abs(dy) <= self.size * self.aspect) & (np.abs(dx) <= self.size / self.aspect)
        if self.kind == "ellipse":
            return (u / (self.size * self.aspect)) ** 2 + (v / (self.size / self.aspect)) ** 2 <= 1.0
        if self.kind == "diamond":
            return np.abs(u) / self.size + np.abs(v) / (self.size * self.aspect) <= 1.0
        if self.kind == "triangle":
            return self._triangle_mask(yy, xx)
        raise ValueError(f"Unknown shape kind {self.kind}")

    def vertices(self) -> np.ndarray:
        angles = self.angle + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        return np.stack([self.cy + self.size * np.sin(angles), self.cx + self.size * np.cos(angles)], axis=1)

    def _triangle_mask(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        pts = self.vertices()
        signs = []
        for i in range(3):
            (y0, x0), (y1, x1) = pts[i], pts[(i + 1) % 3]
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        s = np.stack(signs)
        return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def render_shapes(spec: ShapesSpec, index: int) -> List[Shape]:
    """The analytic shape list behind sample ``index``, in paint order."""
    if index < 0:
        raise ValueError(f"Sample index must be >= 0, got {index}")
    rng = np.random.default_rng([spec.seed, index])
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    for _ in range(count):
        class_id = int(rng.integers(1, spec.num_classes))
        size = rng.uniform(0.1, 0.25) * spec.canvas
        cy, cx = rng.uniform(0.5 * size, spec.canvas - 0.5 * size, size=2)
        aspect = rng.uniform(0.7, 1.4)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        color = np.clip(PALETTE[class_id - 1] + jitter, 0.0, 1.0)
        shapes.append(
            Shape(
                kind=SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)],
                class_id=class_id,
                cy=float(cy),
                cx=float(cx),
                size=float(size),
                aspect=float(aspect),
                angle=float(angle),
                color=tuple(float(c) for c in color),
            )
        )
    return shapes


def generate(spec: ShapesSpec, index: int) -> Sample:
    """Deterministic in (spec, index). Later shapes occlude earlier ones;
    pixel values are quantized to 1/255 so samples survive a PPM round trip."""
    shapes = render_shapes(spec, index)
    rng = np.random.default_rng([spec.seed, index, 1])
    n = spec.canvas
    tint = rng.uniform(0.0, 0.35, size=3)
    image = np.broadcast_to(tint[:, None, None], (3, n, n)).copy()
    label = np.zeros((n, n), dtype=np.int64)
    for shape in shapes:
        m = shape.mask(n, n)
        label[m] = shape.class_id
        image[:, m] = np.asarray(shape.color)[:, None]
    image = image + spec.noise * rng.standard_normal(image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Sample(image=image, label=label)


def generate_split(spec: ShapesSpec, start: int, count: int) -> List[Sample]:
    return [generate(spec, i) for i in range(start, start + count)]


@dataclass
class AugmentPolicy:
    crop: Tuple[int, int] = (64, 64)
    scale_range: Tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"Invalid scale range {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if min(self.crop) < 1:
            raise ConfigurationError(f"Invalid crop size {self.crop}")


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    ry = interpolation_matrix(image.shape[1], height)
    rx = interpolation_matrix(image.shape[2], width)
    return ry @ image @ rx.T


def resize_labels(label: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resampling at half-pixel centres."""
    h, w = label.shape
    rows = np.minimum(np.floor((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(np.floor((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return label[np.ix_(rows, cols)]


def hflip(sample: Sample) -> Sample:
    return Sample(image=sample.image[:, :, ::-1].copy(), label=sample.label[:, ::-1].copy())


def augment(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy) -> Sample:
    """Random scale, horizontal flip and crop, applied congruently."""
    scale = rng.uniform(*policy.scale_range)
    flip = rng.random() < policy.flip_prob
    h, w = sample.label.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    out = Sample(image=resize_image(sample.image, nh, nw), label=resize_labels(sample.label, nh, nw))
    if flip:
        out = hflip(out)

    ch, cw = policy.crop
    ph, pw = max(nh, ch), max(nw, cw)
    image = np.zeros((3, ph, pw))
    label = np.full((ph, pw), policy.ignore_index, dtype=out.label.dtype)
    image[:, :nh, :nw] = out.image
    label[:nh, :nw] = out.label
    oy = int(rng.integers(0, ph - ch + 1))
    ox = int(rng.integers(0, pw - cw + 1))
    return Sample(image=image[:, oy : oy + ch, ox : ox + cw], label=label[oy : oy + ch, ox : ox + cw])


def load_sample(image_path: Union[str, Path], label_path: Union[str, Path]) -> Sample:
    pixels = netpbm.read_ppm(image_path)
    labels = netpbm.read_pgm(label_path)
    if pixels.shape[:2] != labels.shape:
        raise ConsistencyError(
            f"{image_path} is {pixels.shape[1]}x{pixels.shape[0]} but "
            f"{label_path} is {labels.shape[1]}x{labels.shape[0]}"
        )
    return Sample(image=pixels.transpose(2, 0, 1) / 255.0, label=labels.astype(np.int64))


def save_sample(sample: Sample, image_path: Union[str, Path], label_path: Union[str, Path]) -> None:
    pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    netpbm.write_ppm(image_path, pixels)
    netpbm.write_pgm(label_path, sample.label.astype(np.uint8))


def read_manifest(path: Union[str, Path]) -> List[Tuple[Path, Path]]:
    """Image/label path pairs; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"No such manifest: {path}")
    pairs = []
    offset = 0
    for raw in path.read_bytes().splitlines(keepends=True):
        line = raw.decode("utf-8").rstrip("\r\n")
        if line.strip():
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}: expected 'image<TAB>label', got {line!r}", offset=offset)
            pairs.append(tuple(path.parent / p for p in parts))
        offset += len(raw)
    return pairs


def write_manifest(path: Union[str, Path], pairs: Sequence[Tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{image}\t{label}\n" for image, label in pairs))


def load_split(manifest: Union[str, Path], num_classes: Optional[int] = None) -> List[Sample]:
    samples = [load_sample(image, label) for image, label in read_manifest(manifest)]
    if num_classes is not None:
        for s in samples:
            s.check_labels(num_classes)
    logger.info(f"Loaded {len(samples)} samples from {manifest}")
    return samples


@dataclass
class DataSplits:
    train: List[Sample] = field(default_factory=list)
    val: List[Sample] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.train:
            raise ConfigurationError("Training split is empty")


def synthetic_splits(spec: ShapesSpec, train_count: int, val_count: int) -> DataSplits:
    """Train samples use indices [0, train_count), validation the next val_count."""
    return DataSplits(
        train=generate_split(spec, 0, train_count),
        val=generate_split(spec, train_count, val_count),
    )
