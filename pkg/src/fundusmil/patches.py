"""Bag-of-patches extraction from preprocessed fundus images.

Two policies over the 512x512 frame: a regular grid with overlap ratio t
(used at test time, and dense enough to cover every lesion), and uniform
random sampling from a stride-8 candidate lattice (used at training time).
Both drop windows whose retina content falls below the content threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preproc import FRAME, PreprocessedImage


class EmptyBag(Exception):
    """Every candidate window failed the retina-content filter."""


@dataclass(frozen=True)
class PatchSpec:
    d: int = 64
    overlap_t: float = 0.75
    k_train: int = 50
    content_threshold: float = 0.5
    pool_stride: int = 8

    def __post_init__(self):
        if not 1 <= self.d <= FRAME:
            raise ValueError(f"patch side must be in [1, {FRAME}]")
        if not 0.0 <= self.overlap_t < 1.0:
            raise ValueError("overlap_t must be in [0, 1)")
        if self.k_train < 1:
            raise ValueError("k_train must be at least 1")
        if not 0.0 < self.content_threshold <= 1.0:
            raise ValueError("content_threshold must be in (0, 1]")
        if self.pool_stride < 1:
            raise ValueError("pool_stride must be at least 1")

    @property
    def stride(self) -> int:
        return max(1, round(self.d * (1.0 - self.overlap_t)))


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray  # (d, d, 3) float32, copied from the source frame
    origin_row: int
    origin_col: int


@dataclass(frozen=True)
class PatchBag:
    patches: tuple[Patch, ...]
    source_id: str

    def __post_init__(self):
        if len(self.patches) < 1:
            raise ValueError("a bag holds at least one patch")
        origins = {(p.origin_row, p.origin_col) for p in self.patches}
        if len(origins) != len(self.patches):
            raise ValueError("duplicate patch origins")

    def __len__(self) -> int:
        return len(self.patches)

    def pixels_array(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.patches])

    def origins_array(self) -> np.ndarray:
        return np.array(
            [(p.origin_row, p.origin_col) for p in self.patches], dtype=np.int64
        )


def retina_content(mask512: np.ndarray, origin, d: int) -> float:
    """Fraction of retina pixels in the d x d window at origin (row, col)."""
    r, c = origin
    if r < 0 or c < 0 or r + d > mask512.shape[0] or c + d > mask512.shape[1]:
        raise ValueError("window does not fit inside the frame")
    return float(mask512[r : r + d, c : c + d].mean())


def _axis_origins(frame: int, d: int, stride: int) -> np.ndarray:
    origins = list(range(0, frame - d + 1, stride))
    if origins[-1] != frame - d:
        origins.append(frame - d)
    return np.asarray(origins, dtype=np.int64)


def _window_sums(mask512: np.ndarray, rows: np.ndarray, cols: np.ndarray, d: int):
    """Retina pixel counts for every (row, col) window via an integral image."""
    s = np.zeros((mask512.shape[0] + 1, mask512.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask512, axis=0), axis=1, out=s[1:, 1:])
    r0, c0 = rows[:, None], cols[None, :]
    return s[r0 + d, c0 + d] - s[r0, c0 + d] - s[r0 + d, c0] + s[r0, c0]


def _build_bag(img: PreprocessedImage, origins, d: int) -> PatchBag:
    patches = tuple(
        Patch(
            pixels=img.image[r : r + d, c : c + d].copy(),
            origin_row=int(r),
            origin_col=int(c),
        )
        for r, c in origins
    )
    return PatchBag(patches=patches, source_id=img.source_id)


def extract_grid(img: PreprocessedImage, spec: PatchSpec) -> PatchBag:
    """Row-major grid bag: stride max(1, round(d(1-t))) plus the 512-d edge
    origin on each axis, filtered by retina content."""
    axis = _axis_origins(img.image.shape[0], spec.d, spec.stride)
    counts = _window_sums(img.retina_mask, axis, axis, spec.d)
    keep = counts / float(spec.d * spec.d) >= spec.content_threshold
    rr, cc = np.nonzero(keep)
    if rr.size == 0:
        raise EmptyBag(img.source_id)
    origins = [(axis[r], axis[c]) for r, c in zip(rr, cc)]
    return _build_bag(img, origins, spec.d)


def extract_random(img: PreprocessedImage, spec: PatchSpec, seed: int) -> PatchBag:
    """Sample min(k_train, pool size) origins without replacement from the
    pool_stride candidate lattice, uniformly under the seeded generator."""
    frame = img.image.shape[0]
    rows = np.arange(0, frame - spec.d + 1, spec.pool_stride, dtype=np.int64)
    counts = _window_sums(img.retina_mask, rows, rows, spec.d)
    keep = counts / float(spec.d * spec.d) >= spec.content_threshold
    rr, cc = np.nonzero(keep)
    if rr.size == 0:
        raise EmptyBag(img.source_id)
    rng = np.random.default_rng(seed)
    take = min(spec.k_train, rr.size)
    chosen = rng.choice(rr.size, size=take, replace=False)
    origins = [(rows[rr[i]], rows[cc[i]]) for i in chosen]
    return _build_bag(img, origins, spec.d)


def crop_windows(array: np.ndarray, origins: np.ndarray, d: int) -> np.ndarray:
    """Stack the d x d windows of `array` at the given (row, col) origins.

    Used to align segmentation targets (and evaluation masks) with a bag.
    """
    return np.stack([array[r : r + d, c : c + d] for r, c in origins])
