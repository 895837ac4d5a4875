"""Core value types: labeled feature batches, grayscale images, crops, PGM I/O.

All arrays are float64 and treated as immutable after construction; labels
are int64. Images are row-major with the origin at the top-left corner, so
"upper body" means the smallest row indices.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError, ParseError, ShapeError


class Modality(Enum):
    RGB = "rgb"
    IR = "ir"


class Branch(Enum):
    GLOBAL = "global"
    PART = "part"
    FUSED = "fused"


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


@dataclass
class FeatureBatch:
    """n x d feature matrix with one identity label per row."""

    features: np.ndarray
    labels: np.ndarray
    modality: Modality
    branch: Branch

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"labels must be 1-D with length {self.features.shape[0]}, got shape {self.labels.shape}"
            )
        if self.n < 1:
            raise ShapeError("feature batch must hold at least one row")
        if self.labels.size and self.labels.min() < 0:
            raise InvalidArgumentError("identity labels must be >= 0")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class GrayImage:
    """H x W intensity grid with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = as_matrix(self.pixels, "pixels")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise InvalidArgumentError("pixel intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @staticmethod
    def from_map(values: np.ndarray) -> "GrayImage":
        """Wrap a derived map (PC, attention), clamping to [0, 1]."""
        arr = as_matrix(values, "map")
        return GrayImage(np.clip(arr, 0.0, 1.0))


def crop_rows(ratio: float, height: int) -> int:
    """Rows kept by an upper-body crop: max(1, floor(ratio * height)).

    The floor is evaluated with a 1e-9 guard so decimal ratios whose binary
    representation lands just below an exact product (0.7 * 10 = 6.999...)
    still floor to the true value.
    """
    if not (isinstance(ratio, (int, float)) and math.isfinite(ratio)) or ratio <= 0 or ratio > 1:
        raise InvalidArgumentError(f"crop ratio must be in (0, 1], got {ratio!r}")
    return max(1, int(math.floor(ratio * height + 1e-9)))


def crop_upper_body(img: GrayImage, ratio: float) -> GrayImage:
    """Top floor(ratio * H) rows (at least one), full width; ratio 1 copies."""
    kept = crop_rows(ratio, img.height)
    return GrayImage(img.pixels[:kept].copy())


def concat_rows_dimwise(a: FeatureBatch, b: FeatureBatch) -> FeatureBatch:
    """Row-wise feature concatenation; labels must agree row-for-row.

    The result is n x (d_a + d_b), tagged with the leading operand's
    modality and the FUSED branch tag.
    """
    if a.n != b.n:
        raise ShapeError(f"row counts differ: {a.n} vs {b.n}")
    if not np.array_equal(a.labels, b.labels):
        raise ShapeError("labels disagree between the two batches")
    return FeatureBatch(
        features=np.concatenate([a.features, b.features], axis=1),
        labels=a.labels.copy(),
        modality=a.modality,
        branch=Branch.FUSED,
    )


# --- binary PGM (P5, maxval 255) ---------------------------------------------

def write_pgm(img: GrayImage, path) -> None:
    """P5 with maxval 255; intensities quantized by round-half-up."""
    levels = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + levels.tobytes())


def _pgm_tokens(data: bytes):
    """Yield whitespace-separated header tokens, skipping # comments."""
    i = 0
    while True:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            return
        yield data[start:i], i


def read_pgm(path) -> GrayImage:
    """Read a binary PGM; maxval must be 255. Intensity = value / 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    end = 0
    for tok, pos in _pgm_tokens(data):
        fields.append(tok)
        end = pos
        if len(fields) == 4:
            break
    if len(fields) < 4:
        raise ParseError(f"{path}: truncated PGM header")
    if fields[0] != b"P5":
        raise ParseError(f"{path}: expected binary PGM magic P5, got {fields[0]!r}")
    try:
        width, height, maxval = (int(fields[k]) for k in (1, 2, 3))
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric PGM header field") from exc
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise ParseError(f"{path}: bad dimensions {width}x{height}")
    raster = data[end + 1 : end + 1 + width * height]
    if len(raster) != width * height:
        raise ParseError(f"{path}: expected {width * height} raster bytes, got {len(raster)}")
    levels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return GrayImage(levels.astype(np.float64) / 255.0)
