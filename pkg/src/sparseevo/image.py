"""Core image and mask types shared by every attack.

Images are dense float arrays in [0, 1] with a channel-major layout (C, H, W).
Pixel positions are addressed by a flat index i = column + width * row, so a
boolean vector of length W*H selects pixels independently of the channel count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageTensor",
    "PixelMask",
    "AttackGoal",
    "ShapeMismatchError",
    "flatten_index",
    "unflatten_index",
    "compose",
    "seed_vector",
    "pixel_sparsity",
    "l2_distance",
]


class ShapeMismatchError(ValueError):
    """Two images (or an image and a mask) disagree on their dimensions."""


def flatten_index(column: int, row: int, width: int) -> int:
    """Map a (column, row) pixel position to its flat index column + width * row."""
    if width < 1:
        raise ValueError(f"width must be positive, got {width}")
    if not (0 <= column < width):
        raise ValueError(f"column {column} out of range for width {width}")
    if row < 0:
        raise ValueError(f"row must be non-negative, got {row}")
    return column + width * row


def unflatten_index(index: int, width: int) -> tuple[int, int]:
    """Inverse of :func:`flatten_index`; returns (column, row)."""
    if width < 1:
        raise ValueError(f"width must be positive, got {width}")
    if index < 0:
        raise ValueError(f"index must be non-negative, got {index}")
    return index % width, index // width


class ImageTensor:
    """An immutable (C, H, W) float64 image with values in [0, 1].

    The backing array is marked read-only; ``data`` hands out that array
    directly, so callers that need to modify pixels must copy first.
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray, *, _validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate:
            if arr.ndim != 3:
                raise ValueError(f"expected a (C, H, W) array, got shape {arr.shape}")
            if min(arr.shape) < 1:
                raise ValueError(f"all dimensions must be positive, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("image contains non-finite values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("pixel values must lie in [0, 1]")
            arr = arr.copy()
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ImageTensor":
        # Internal fast path for arrays that are valid by construction
        # (e.g. every value was picked from an already-validated image).
        return cls(arr, _validate=False)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def channels(self) -> int:
        return self._data.shape[0]

    @property
    def height(self) -> int:
        return self._data.shape[1]

    @property
    def width(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._data.shape

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __hash__(self):  # pragma: no cover - images are not meant to be dict keys
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        c, h, w = self._data.shape
        return f"ImageTensor(C={c}, H={h}, W={w})"


def _require_same_shape(a: ImageTensor, b: ImageTensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


class PixelMask:
    """A boolean vector over pixel positions (flat layout, length W*H)."""

    __slots__ = ("_bits", "_width")

    def __init__(self, bits: np.ndarray, width: int):
        arr = np.asarray(bits)
        if arr.dtype != np.bool_:
            raise ValueError(f"mask bits must be boolean, got dtype {arr.dtype}")
        if arr.ndim != 1:
            raise ValueError(f"mask bits must be a flat vector, got shape {arr.shape}")
        if width < 1:
            raise ValueError(f"width must be positive, got {width}")
        if arr.size == 0 or arr.size % width != 0:
            raise ValueError(f"mask length {arr.size} is not a multiple of width {width}")
        self._bits = arr.copy()
        self._bits.setflags(write=False)
        self._width = width

    @classmethod
    def zeros(cls, width: int, height: int) -> "PixelMask":
        return cls(np.zeros(width * height, dtype=bool), width)

    @classmethod
    def ones(cls, width: int, height: int) -> "PixelMask":
        return cls(np.ones(width * height, dtype=bool), width)

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._width

    @property
    def height(self) -> int:
        return self._bits.size // self._width

    @property
    def size(self) -> int:
        return self._bits.size

    @property
    def popcount(self) -> int:
        return int(self._bits.sum())

    def to_grid(self) -> np.ndarray:
        """The mask as an (H, W) boolean grid."""
        return self._bits.reshape(self.height, self._width)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PixelMask):
            return NotImplemented
        return self._width == other._width and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self):  # pragma: no cover
        return hash((self._width, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"PixelMask(width={self._width}, height={self.height}, popcount={self.popcount})"


@dataclass(frozen=True)
class AttackGoal:
    """What counts as a successful (adversarial) prediction.

    Untargeted: any label other than ``label`` (the source's true label).
    Targeted: exactly ``label`` (the chosen target class).
    """

    kind: str
    label: int

    _KINDS = ("untargeted", "targeted")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"goal kind must be one of {self._KINDS}, got {self.kind!r}")
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")

    @classmethod
    def untargeted(cls, source_label: int) -> "AttackGoal":
        return cls("untargeted", source_label)

    @classmethod
    def targeted(cls, target_label: int, source_label: int | None = None) -> "AttackGoal":
        if source_label is not None and target_label == source_label:
            raise ValueError("target label must differ from the source label")
        return cls("targeted", target_label)

    @property
    def targeted_goal(self) -> bool:
        return self.kind == "targeted"

    def is_met(self, predicted_label: int) -> bool:
        if self.kind == "targeted":
            return predicted_label == self.label
        return predicted_label != self.label


def compose(source: ImageTensor, start: ImageTensor, mask: PixelMask) -> ImageTensor:
    """Blend two images pixel-wise: mask bit 1 takes the start pixel, 0 the source.

    Every output value is picked (not interpolated) from one of the inputs, so
    the all-zeros mask reproduces ``source`` exactly and the all-ones mask
    reproduces ``start`` exactly.
    """
    _require_same_shape(source, start)
    if mask.size != source.pixel_count or mask.width != source.width:
        raise ShapeMismatchError(
            f"mask geometry {mask.width}x{mask.height} does not match image "
            f"{source.width}x{source.height}"
        )
    out = compose_arrays(source.data, start.data, mask.bits)
    return ImageTensor._wrap(out)


def compose_arrays(source: np.ndarray, start: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Array-level compose used by attack inner loops; no validation."""
    grid = bits.reshape(source.shape[1], source.shape[2])
    return np.where(grid[None, :, :], start, source)


def seed_vector(source: ImageTensor, start: ImageTensor) -> PixelMask:
    """Mask of pixels where the two images differ on at least one channel."""
    _require_same_shape(source, start)
    bits = np.any(source.data != start.data, axis=0).reshape(-1)
    return PixelMask(bits, source.width)


def pixel_sparsity(source: ImageTensor, perturbed: ImageTensor) -> float:
    """Fraction of pixel positions at which the two images differ (any channel)."""
    _require_same_shape(source, perturbed)
    differing = int(np.any(source.data != perturbed.data, axis=0).sum())
    return differing / source.pixel_count


def l2_distance(a: ImageTensor, b: ImageTensor) -> float:
    """Euclidean distance over all channel values."""
    _require_same_shape(a, b)
    return float(np.sqrt(np.sum((a.data - b.data) ** 2)))
