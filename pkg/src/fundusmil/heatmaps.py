"""Stitch per-patch outputs back into image-level maps.

Lesion maps average overlapping patch predictions (mean over coverage);
attention maps accumulate alpha over footprints, average by coverage, then
rescale by the maximum so the hottest region reads 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BagForwardResult
from .preproc import FRAME


@dataclass(frozen=True)
class StitchedMaps:
    lesion_map: np.ndarray  # (frame, frame, channels) in [0, 1]
    attention_map: np.ndarray  # (frame, frame) in [0, 1]
    coverage: np.ndarray  # (frame, frame) int patch count


def _check_origins(origins: np.ndarray, d: int, frame: int):
    if origins.size and (
        origins.min() < 0 or (origins + d).max() > frame
    ):
        raise ValueError("patch origin outside the frame")


def stitch_lesion_maps(result: BagForwardResult, frame: int = FRAME):
    """Mean of overlapping patch predictions; uncovered pixels stay 0.

    Returns (frame x frame x channels map, coverage counts).
    """
    k, d, _, channels = result.lesion_maps.shape
    _check_origins(result.origins, d, frame)
    acc = np.zeros((frame, frame, channels), dtype=np.float64)
    coverage = np.zeros((frame, frame), dtype=np.int64)
    for i in range(k):
        r, c = result.origins[i]
        acc[r : r + d, c : c + d] += result.lesion_maps[i]
        coverage[r : r + d, c : c + d] += 1
    covered = coverage > 0
    acc[covered] /= coverage[covered, None]
    return acc, coverage


def stitch_attention(result: BagForwardResult, frame: int = FRAME) -> np.ndarray:
    """Coverage-averaged attention weights, rescaled by the maximum."""
    k, d = result.alphas.shape[0], result.lesion_maps.shape[1]
    _check_origins(result.origins, d, frame)
    acc = np.zeros((frame, frame), dtype=np.float64)
    coverage = np.zeros((frame, frame), dtype=np.int64)
    for i in range(k):
        r, c = result.origins[i]
        acc[r : r + d, c : c + d] += result.alphas[i]
        coverage[r : r + d, c : c + d] += 1
    covered = coverage > 0
    acc[covered] /= coverage[covered]
    peak = acc.max()
    if peak > 0:
        acc /= peak
    return acc


def stitch_all(result: BagForwardResult, frame: int = FRAME) -> StitchedMaps:
    lesion_map, coverage = stitch_lesion_maps(result, frame)
    return StitchedMaps(
        lesion_map=lesion_map,
        attention_map=stitch_attention(result, frame),
        coverage=coverage,
    )
