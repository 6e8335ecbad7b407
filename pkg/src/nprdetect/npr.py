"""Neighboring pixel relationships (NPR).

Each image channel is tiled into non-overlapping ``l x l`` grids anchored at
the top-left corner. Inside a grid the pixels are enumerated row-major as
``w_1 .. w_n`` (``n = l*l``) and replaced by ``w_i - p``, where the pivot ``p``
is one grid member ``w_j``, the grid mean, or the grid maximum.

An image whose grids were produced by nearest-neighbour up-sampling therefore
maps to an all-zero NPR, while natural pixel noise survives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .image import as_image, write_png

SUPPORTED_GRID_SIDES = (2, 3)
PIVOT_AVG = "avg"
PIVOT_MAX = "max"
_PIVOT_CODES = {PIVOT_AVG: 254, PIVOT_MAX: 255}
NPR_MAGIC = b"NPR1"
_HEADER = struct.Struct("<4sIIIBB")

Pivot = Union[int, str]


@dataclass(frozen=True)
class GridSpec:
    """Grid side ``l`` and pivot choice.

    ``pivot`` is a 1-based row-major index ``j`` into the grid, or one of
    ``"avg"`` / ``"max"``. The defaults (``l=2``, ``j=1``) subtract the
    top-left pixel of every 2x2 grid.
    """

    l: int = 2
    pivot: Pivot = 1

    def __post_init__(self):
        if isinstance(self.l, bool) or not isinstance(self.l, (int, np.integer)):
            raise ValueError(f"grid side must be an integer, got {self.l!r}")
        if self.l not in SUPPORTED_GRID_SIDES:
            raise ValueError(f"grid side l={self.l} not supported (use 2 or 3)")
        pivot = self.pivot
        if isinstance(pivot, str):
            pivot = pivot.lower()
            if pivot not in (PIVOT_AVG, PIVOT_MAX):
                raise ValueError(f"unknown pivot {self.pivot!r}")
            object.__setattr__(self, "pivot", pivot)
        elif isinstance(pivot, (int, np.integer)) and not isinstance(pivot, bool):
            if not 1 <= pivot <= self.l * self.l:
                raise ValueError(f"pivot index {pivot} outside 1..{self.l * self.l}")
            object.__setattr__(self, "pivot", int(pivot))
        else:
            raise ValueError(f"invalid pivot {self.pivot!r}")

    @property
    def n(self) -> int:
        return self.l * self.l

    @property
    def pivot_code(self) -> int:
        if isinstance(self.pivot, str):
            return _PIVOT_CODES[self.pivot]
        return self.pivot

    @classmethod
    def from_code(cls, l: int, code: int) -> "GridSpec":
        for name, c in _PIVOT_CODES.items():
            if code == c:
                return cls(l, name)
        return cls(l, int(code))

    @classmethod
    def parse(cls, l: int = 2, pivot: str = "index:1") -> "GridSpec":
        """Build from CLI-style text: ``index:J``, ``avg`` or ``max``."""
        text = str(pivot).strip().lower()
        if text.startswith("index:"):
            try:
                return cls(int(l), int(text.split(":", 1)[1]))
            except ValueError as exc:
                raise ValueError(f"bad pivot {pivot!r}: {exc}") from None
        if text in (PIVOT_AVG, PIVOT_MAX):
            return cls(int(l), text)
        raise ValueError(f"bad pivot {pivot!r} (expected index:J, avg or max)")

    def describe(self) -> str:
        piv = f"index:{self.pivot}" if isinstance(self.pivot, int) else self.pivot
        return f"l={self.l},pivot={piv}"


ALL_GRIDSPECS = tuple(
    [GridSpec(l, j) for l in SUPPORTED_GRID_SIDES for j in range(1, l * l + 1)]
    + [GridSpec(l, p) for l in SUPPORTED_GRID_SIDES for p in (PIVOT_AVG, PIVOT_MAX)]
)


@dataclass
class NprMap:
    """Per-grid pixel differences, ``(H, W, C)`` float32 in [-1, 1]."""

    data: np.ndarray
    grid: GridSpec

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, NprMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


def center_crop_to_multiple(image: np.ndarray, l: int) -> np.ndarray:
    """Center-crop height and width down to the nearest multiple of ``l``."""
    h, w = image.shape[:2]
    hc, wc = h - h % l, w - w % l
    if hc == 0 or wc == 0:
        raise ValueError(f"image {h}x{w} is smaller than one {l}x{l} grid")
    top, left = (h - hc) // 2, (w - wc) // 2
    return image[top:top + hc, left:left + wc]


def _grid_pivot(members: list, pivot: Pivot) -> np.ndarray:
    if pivot == PIVOT_MAX:
        out = members[0]
        for m in members[1:]:
            out = np.maximum(out, m)
        return out
    return members[pivot - 1]


def _avg_relationships(members: list) -> list:
    # (n*w_i - sum) / n in f64 is exact up to the final division, so a constant
    # shift cancels bit-for-bit; the row-major sum order is fixed.
    n = len(members)
    total = members[0].astype(np.float64)
    for m in members[1:]:
        total = total + m
    return [((n * m.astype(np.float64) - total) / n).astype(np.float32) for m in members]


def extract_npr(image, grid: GridSpec = GridSpec()) -> NprMap:
    """Compute the NPR map of ``image`` under ``grid``.

    Dimensions that are not multiples of ``grid.l`` are center-cropped first;
    the result has the cropped shape.
    """
    img = as_image(image, check_range=False)
    img = center_crop_to_multiple(img, grid.l)
    h, w, c = img.shape
    l = grid.l
    tiles = img.reshape(h // l, l, w // l, l, c)
    members = [tiles[:, r, :, s, :] for r in range(l) for s in range(l)]
    if grid.pivot == PIVOT_AVG:
        rel = _avg_relationships(members)
        out = np.empty_like(tiles)
        for k, r in enumerate(rel):
            out[:, k // l, :, k % l, :] = r
        out = out.reshape(h, w, c)
    else:
        pivot = _grid_pivot(members, grid.pivot)[:, None, :, None, :]
        out = (tiles - pivot).reshape(h, w, c)
    return NprMap(np.ascontiguousarray(out, dtype=np.float32), grid)


def extract_npr_batch(images: np.ndarray, grid: GridSpec = GridSpec()) -> np.ndarray:
    """NPR for a stack of equally sized ``(N, H, W, C)`` images."""
    return np.stack([extract_npr(im, grid).data for im in images])


def npr_heatmap(npr: NprMap, channel: int) -> np.ndarray:
    """Absolute NPR of one channel, min-max scaled to [0, 1].

    A constant magnitude (including all-zero) maps to an all-zero heatmap.
    """
    if not 0 <= channel < npr.channels:
        raise IndexError(f"channel {channel} out of range for {npr.channels}-channel map")
    mag = np.abs(npr.data[:, :, channel].astype(np.float64))
    lo, hi = mag.min(), mag.max()
    if hi <= lo:
        return np.zeros(mag.shape + (1,), dtype=np.float32)
    return ((mag - lo) / (hi - lo)).astype(np.float32)[:, :, None]


def npr_difference(a: NprMap, b: NprMap) -> NprMap:
    """Element-wise ``a - b`` of two NPR maps sharing shape and grid."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    return NprMap((a.data - b.data).astype(np.float32), a.grid)


def dumps_npr(npr: NprMap) -> bytes:
    header = _HEADER.pack(NPR_MAGIC, npr.height, npr.width, npr.channels, npr.grid.l, npr.grid.pivot_code)
    return header + np.ascontiguousarray(npr.data, dtype="<f4").tobytes()


def loads_npr(buf: bytes) -> NprMap:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated NPR file")
    magic, h, w, c, l, code = _HEADER.unpack_from(buf)
    if magic != NPR_MAGIC:
        raise ValueError(f"bad NPR magic {magic!r}")
    expected = _HEADER.size + 4 * h * w * c
    if len(buf) != expected:
        raise ValueError(f"NPR payload size {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)
    return NprMap(data, GridSpec.from_code(l, code))


def save_npr(path, npr: NprMap) -> None:
    Path(path).write_bytes(dumps_npr(npr))


def load_npr(path) -> NprMap:
    return loads_npr(Path(path).read_bytes())


def save_heatmaps(npr: NprMap, out_prefix) -> list:
    """Write one grayscale PNG per channel as ``<prefix>_c<k>.png``."""
    paths = []
    for ch in range(npr.channels):
        path = Path(f"{out_prefix}_c{ch}.png")
        write_png(path, npr_heatmap(npr, ch))
        paths.append(path)
    return paths
