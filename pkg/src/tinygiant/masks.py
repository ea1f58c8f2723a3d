"""Uncompressed column-major RLE masks and their reduction to patch index sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MalformedMaskError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class RleMask:
    """COCO-style uncompressed RLE: runs alternate background/foreground, column-major."""

    size: tuple[int, int]
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(size=tuple(obj["size"]), counts=tuple(obj["counts"]))


@dataclass(frozen=True)
class PatchGrid:
    grid_size: tuple[int, int]
    image_size: tuple[int, int]
    patch_size: tuple[int, int]

    @property
    def resized(self) -> tuple[int, int]:
        return self.grid_size[0] * self.patch_size[0], self.grid_size[1] * self.patch_size[1]

    @property
    def num_patches(self) -> int:
        return self.grid_size[0] * self.grid_size[1]

    @classmethod
    def square(cls, image_size: int, patch_size: int, source_size: tuple[int, int] | None = None) -> "PatchGrid":
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        g = image_size // patch_size
        return cls((g, g), source_size or (image_size, image_size), (patch_size, patch_size))


@dataclass(frozen=True)
class RegionIndexSet:
    region_id: int
    indices: tuple[int, ...]


def rle_decode(mask: RleMask) -> np.ndarray:
    h, w = mask.size
    if any(c < 0 for c in mask.counts):
        raise MalformedMaskError("negative run length")
    total = sum(mask.counts)
    if total != h * w:
        raise MalformedMaskError(f"run lengths sum to {total}, expected {h}x{w}={h * w}")
    values = np.zeros(len(mask.counts), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, mask.counts)
    return flat.reshape((w, h)).T.copy()


def rle_encode(pixels: np.ndarray) -> RleMask:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {pixels.shape}")
    flat = (pixels != 0).T.reshape(-1).astype(np.int8)
    # run boundaries, with a leading background run of length 0 if needed
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    if not counts:
        counts = [0]
    return RleMask(size=pixels.shape, counts=tuple(counts))


def resize_nearest(pixels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = pixels.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return pixels[np.ix_(rows, cols)]


def patch_coverage(pixels: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Foreground fraction per patch, row-major over the grid."""
    gr, gc = grid.grid_size
    ph, pw = grid.patch_size
    resized = resize_nearest(np.asarray(pixels) != 0, grid.resized).astype(np.float64)
    blocks = resized.reshape(gr, ph, gc, pw).mean(axis=(1, 3))
    return blocks.reshape(-1)


def downsample_mask(pixels: np.ndarray, grid: PatchGrid, threshold: float = 0.5, region_id: int = 0) -> RegionIndexSet:
    """Patches whose foreground coverage reaches ``threshold``.

    If none qualifies, the single best-covered patch is returned (ties go to
    the lowest index). A mask that the resize wiped out entirely falls back
    to the patch holding most of the original foreground pixels.
    """
    pixels = np.asarray(pixels) != 0
    if pixels.shape != tuple(grid.image_size):
        raise ValueError(f"mask shape {pixels.shape} does not match grid image size {grid.image_size}")
    if not pixels.any():
        raise EmptyRegionError(f"region {region_id} has an empty mask and cannot be grounded")
    coverage = patch_coverage(pixels, grid)
    chosen = np.flatnonzero(coverage >= threshold)
    if chosen.size == 0:
        if coverage.max() == 0:
            coverage = _source_pixel_counts(pixels, grid)
        chosen = np.array([int(np.argmax(coverage))])
    return RegionIndexSet(region_id, tuple(int(i) for i in chosen))


def _source_pixel_counts(pixels: np.ndarray, grid: PatchGrid) -> np.ndarray:
    h, w = pixels.shape
    gr, gc = grid.grid_size
    ys, xs = np.nonzero(pixels)
    cells = (ys * gr // h) * gc + (xs * gc // w)
    return np.bincount(cells, minlength=grid.num_patches).astype(np.float64)
