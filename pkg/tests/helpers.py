"""Shared builders for synthetic labeled examples used across test modules."""

from __future__ import annotations

import cv2
import numpy as np

from fundusmil.preproc import DiskGeometry, PreprocessedImage
from fundusmil.training import LabeledExample


def make_image(seed, frame=128, full_mask=False):
    """Random retina-like frame: noise inside a centered disk, zero outside."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 255.0, (frame, frame, 3)).astype(np.float32)
    if full_mask:
        mask = np.ones((frame, frame), dtype=bool)
    else:
        yy, xx = np.mgrid[0:frame, 0:frame]
        c = (frame - 1) / 2.0
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= (frame * 0.48) ** 2
        img[~mask] = 0.0
    return PreprocessedImage(
        image=img,
        retina_mask=mask,
        source_id=f"synthetic-{seed}",
        disk=DiskGeometry(frame / 2.0, frame / 2.0, frame * 0.48),
    )


def make_smooth_example(seed, y_rdr, frame=64, with_masks=False):
    """Low-contrast smooth example for finite-difference gradient checks.

    Full-range noise drives batch statistics into a regime where the loss
    curvature swamps a 1e-3 difference step; a smooth field keeps the
    truncation error well under the gradient-check tolerance.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, (8, 8, 3)).astype(np.float32)
    img = cv2.resize(base, (frame, frame), interpolation=cv2.INTER_CUBIC)
    img = (110.0 + 40.0 * img).astype(np.float32)
    pre = PreprocessedImage(
        image=img,
        retina_mask=np.ones((frame, frame), dtype=bool),
        source_id=f"smooth-{seed}",
        disk=DiskGeometry(frame / 2.0, frame / 2.0, frame / 2.0),
    )
    lesions = None
    if with_masks:
        lesions = np.zeros((frame, frame, 3), dtype=bool)
        lesions[20:40, 20:40, 0] = True
        lesions[10:25, 30:50, 1] = True
        lesions[40:55, 5:20, 2] = True
    return LabeledExample(
        image=pre, y_rdr=y_rdr, lesion_masks=lesions, has_masks=with_masks
    )


def make_example(seed, y_rdr, frame=128, with_masks=False, blob_radius=10,
                 full_mask=False):
    """Labeled example; optional centered square-ish lesion blobs per channel."""
    pre = make_image(seed, frame=frame, full_mask=full_mask)
    lesions = None
    if with_masks:
        rng = np.random.default_rng(seed + 7919)
        lesions = np.zeros((frame, frame, 3), dtype=bool)
        for ch in range(3):
            cy = int(rng.integers(frame // 4, 3 * frame // 4))
            cx = int(rng.integers(frame // 4, 3 * frame // 4))
            r = blob_radius
            lesions[
                max(cy - r, 0) : cy + r, max(cx - r, 0) : cx + r, ch
            ] = True
        lesions &= pre.retina_mask[:, :, None]
    return LabeledExample(
        image=pre, y_rdr=y_rdr, lesion_masks=lesions, has_masks=with_masks
    )
