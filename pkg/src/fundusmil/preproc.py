"""Fundus image preprocessing.

Takes an arbitrary-resolution fundus photograph and produces the canonical
512x512 normalized image together with its binary retina mask:

1. rescale to a fixed working width, preserving aspect ratio
2. locate the circular eye disk with a voting (Hough) circle detector
3. crop a square of side 2*radius centered on the disk, zero-padding where
   the disk is clipped by the frame, and resize to 512x512
4. subtract the local color average (Gaussian high-pass) and zero out the
   outer rim of the disk to suppress filtering artifacts
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

FRAME = 512
# Geometry of the eye disk after crop_pad_resize: the crop square is centered
# on the disk and spans the full frame, so the disk always maps to a circle
# of radius FRAME/2 centered mid-frame (pixel centers at integer coords).
MAPPED_CENTER = (FRAME - 1) / 2.0
MAPPED_RADIUS = FRAME / 2.0

# Local color normalization constants (Gaussian high-pass recipe).
COLOR_SCALE = 4.0
COLOR_OFFSET = 128.0
COLOR_SIGMA = MAPPED_RADIUS / 30.0

# Circle search window, as fractions of the working width.
RADIUS_MIN_FRAC = 0.2
RADIUS_MAX_FRAC = 0.6
RADIUS_STEP = 2.0
VOTE_ACCEPT = 0.4
MAX_EDGE_PIXELS = 20000


class DiskNotFound(Exception):
    """No circle cleared the vote threshold; the image must be dropped."""


@dataclass(frozen=True)
class RawFundusImage:
    """Unprocessed fundus photograph, H x W x 3 values in [0, 255]."""

    pixels: np.ndarray
    source_id: str

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {p.shape}")
        if p.shape[0] < 64 or p.shape[1] < 64:
            raise ValueError(f"image too small: {p.shape[0]}x{p.shape[1]}")


@dataclass(frozen=True)
class DiskGeometry:
    """Detected eye disk circle, in source-image pixel coordinates."""

    center_row: float
    center_col: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class PreprocessedImage:
    """512x512 normalized image plus the binary retina mask."""

    image: np.ndarray  # (512, 512, 3) float32 in [0, 255]
    retina_mask: np.ndarray  # (512, 512) bool
    source_id: str
    disk: DiskGeometry


def _edge_pixels(gray: np.ndarray):
    """Strong gradient pixels with their unit gradient directions.

    A light pre-blur plus Scharr derivatives keeps the direction estimate
    accurate enough that votes cast r pixels away land within a couple of
    pixels of the true center.
    """
    gray = cv2.GaussianBlur(gray, (0, 0), 1.5)
    gx = cv2.Scharr(gray, cv2.CV_32F, 1, 0)
    gy = cv2.Scharr(gray, cv2.CV_32F, 0, 1)
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    if peak <= 1e-6:
        return None
    thresh = max(0.25 * peak, 8.0)
    ys, xs = np.nonzero(mag > thresh)
    if ys.size == 0:
        return None
    if ys.size > MAX_EDGE_PIXELS:
        keep = np.argsort(mag[ys, xs])[-MAX_EDGE_PIXELS:]
        ys, xs = ys[keep], xs[keep]
    m = mag[ys, xs]
    return ys.astype(np.float32), xs.astype(np.float32), gy[ys, xs] / m, gx[ys, xs] / m


def _vote_accumulator(shape, ys, xs, uy, ux, radius):
    """Accumulate center votes for one candidate radius (both polarities)."""
    h, w = shape
    acc = np.zeros(h * w, dtype=np.float32)
    for sign in (1.0, -1.0):
        cy = np.rint(ys + sign * radius * uy).astype(np.int64)
        cx = np.rint(xs + sign * radius * ux).astype(np.int64)
        ok = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        acc += np.bincount(cy[ok] * w + cx[ok], minlength=h * w)
    return acc.reshape(h, w)


def _fit_circle(ys, xs):
    """Algebraic least-squares circle fit; returns (cy, cx, r) or None."""
    a = np.stack([2.0 * ys, 2.0 * xs, np.ones_like(ys)], axis=1)
    b = ys * ys + xs * xs
    try:
        sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    except np.linalg.LinAlgError:
        return None
    cy, cx, c = sol
    r2 = c + cy * cy + cx * cx
    if not np.isfinite(r2) or r2 <= 0:
        return None
    return float(cy), float(cx), float(np.sqrt(r2))


def detect_disk(raw: RawFundusImage, width_target: int = FRAME) -> DiskGeometry:
    """Locate the circular eye disk via a voting circle detector.

    The image is shrunk to at most `width_target` wide before voting; the
    winning circle is refined with a least-squares fit on the supporting edge
    pixels and mapped back to source coordinates. Raises DiskNotFound when no
    radius in [0.2, 0.6] x the voting width collects at least VOTE_ACCEPT of
    the votes a full circle boundary would cast.
    """
    if width_target <= 0:
        raise ValueError("width_target must be positive")
    src_h, src_w = raw.pixels.shape[:2]
    # Never enlarge for voting: interpolation smears the rim over several
    # pixels and the spread votes fall below VOTE_ACCEPT. Small sources keep
    # their sharp native edges; large ones shrink with INTER_AREA.
    vote_w = min(width_target, src_w)
    scale_x = vote_w / src_w
    small_h = max(16, int(round(src_h * scale_x)))
    scale_y = small_h / src_h
    gray = cv2.cvtColor(raw.pixels.astype(np.uint8), cv2.COLOR_RGB2GRAY)
    gray = cv2.resize(gray, (vote_w, small_h), interpolation=cv2.INTER_AREA)
    gray = gray.astype(np.float32)

    edges = _edge_pixels(gray)
    if edges is None:
        raise DiskNotFound(raw.source_id)
    ys, xs, uy, ux = edges

    radii = np.arange(
        RADIUS_MIN_FRAC * vote_w, RADIUS_MAX_FRAC * vote_w, RADIUS_STEP
    )
    best = None  # (score, radius, peak_row, peak_col)
    kernel = np.ones((5, 5), dtype=np.float32)
    for r in radii:
        acc = _vote_accumulator(gray.shape, ys, xs, uy, ux, r)
        smooth = cv2.filter2D(acc, -1, kernel, borderType=cv2.BORDER_CONSTANT)
        idx = int(np.argmax(smooth))
        score = float(smooth.flat[idx]) / (2.0 * np.pi * r)
        if best is None or score > best[0]:
            best = (score, float(r), idx // gray.shape[1], idx % gray.shape[1])

    if best is None or best[0] < VOTE_ACCEPT:
        raise DiskNotFound(raw.source_id)
    _, r0, py, px = best

    # Refine on the edge pixels that lie near the winning circle.
    cy, cx, r = float(py), float(px), r0
    for _ in range(2):
        dist = np.hypot(ys - cy, xs - cx)
        inlier = np.abs(dist - r) <= 1.5 * RADIUS_STEP
        if inlier.sum() >= 6:
            fit = _fit_circle(ys[inlier], xs[inlier])
            if fit is not None and abs(fit[2] - r0) <= 3 * RADIUS_STEP:
                cy, cx, r = fit

    return DiskGeometry(
        center_row=(cy + 0.5) / scale_y - 0.5,
        center_col=(cx + 0.5) / scale_x - 0.5,
        radius=r / scale_x,
    )


def crop_pad_resize(raw: RawFundusImage, geom: DiskGeometry):
    """Crop the square of side 2*radius around the disk and resize to 512.

    Regions of the square falling outside the source frame are zero padded
    (this is how vertically clipped disks are handled). Returns the resized
    image as float32 and the rasterized disk mask under the same transform.
    """
    side = max(2, int(round(2.0 * geom.radius)))
    y0 = int(round(geom.center_row - geom.radius))
    x0 = int(round(geom.center_col - geom.radius))
    src = raw.pixels
    canvas = np.zeros((side, side, 3), dtype=np.float32)
    ys0, ys1 = max(0, y0), min(src.shape[0], y0 + side)
    xs0, xs1 = max(0, x0), min(src.shape[1], x0 + side)
    if ys1 > ys0 and xs1 > xs0:
        canvas[ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0] = src[ys0:ys1, xs0:xs1]
    image512 = cv2.resize(canvas, (FRAME, FRAME), interpolation=cv2.INTER_AREA)
    image512 = np.ascontiguousarray(image512, dtype=np.float32)

    # Mask: pixels whose source position is inside the disk and inside the
    # source frame (the padded part of a clipped disk carries no retina).
    step = side / FRAME
    centers = (np.arange(FRAME, dtype=np.float64) + 0.5) * step - 0.5
    sy = y0 + centers
    sx = x0 + centers
    dy = sy - geom.center_row
    dx = sx - geom.center_col
    inside_disk = dy[:, None] ** 2 + dx[None, :] ** 2 <= geom.radius**2
    in_frame_y = (sy >= -0.5) & (sy < src.shape[0] - 0.5)
    in_frame_x = (sx >= -0.5) & (sx < src.shape[1] - 0.5)
    mask512 = inside_disk & in_frame_y[:, None] & in_frame_x[None, :]
    return image512, mask512


def normalize_color(
    image512: np.ndarray,
    mask512: np.ndarray,
    scale: float = COLOR_SCALE,
    offset: float = COLOR_OFFSET,
    sigma: float = COLOR_SIGMA,
) -> np.ndarray:
    """Subtract the local color average (Gaussian blur, reflect boundary).

    out = clamp(scale * (image - blur) + offset, 0, 255) inside the mask;
    pixels outside the mask are set to `offset`.
    """
    img = image512.astype(np.float64)
    blur = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    out = np.clip(scale * (img - blur) + offset, 0.0, 255.0)
    out[~mask512] = offset
    return out.astype(np.float32)


def zero_boundary(
    image512: np.ndarray,
    mask512: np.ndarray,
    fraction: float = 0.05,
    *,
    source_id: str = "",
    disk: DiskGeometry | None = None,
) -> PreprocessedImage:
    """Zero the outer `fraction` of the mapped disk in image and mask."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    yy = np.arange(FRAME, dtype=np.float64) - MAPPED_CENTER
    dist2 = yy[:, None] ** 2 + yy[None, :] ** 2
    far = dist2 > ((1.0 - fraction) * MAPPED_RADIUS) ** 2
    image = image512.astype(np.float32).copy()
    image[far] = 0.0
    mask = mask512 & ~far
    if disk is None:
        disk = DiskGeometry(MAPPED_CENTER, MAPPED_CENTER, MAPPED_RADIUS)
    return PreprocessedImage(image=image, retina_mask=mask, source_id=source_id, disk=disk)


def preprocess_image(
    raw: RawFundusImage, width_target: int = FRAME, fraction: float = 0.05
) -> PreprocessedImage:
    """Full pipeline: detect disk, crop/pad/resize, color-normalize, zero rim."""
    geom = detect_disk(raw, width_target)
    image512, mask512 = crop_pad_resize(raw, geom)
    image512 = normalize_color(image512, mask512)
    return zero_boundary(image512, mask512, fraction, source_id=raw.source_id, disk=geom)


def warp_mask_to_frame(mask: np.ndarray, geom: DiskGeometry) -> np.ndarray:
    """Map a raw-frame binary mask into the preprocessed 512 frame.

    Applies the same crop/pad/resize as the image path, with nearest-neighbor
    sampling so the output stays binary.
    """
    side = max(2, int(round(2.0 * geom.radius)))
    y0 = int(round(geom.center_row - geom.radius))
    x0 = int(round(geom.center_col - geom.radius))
    canvas = np.zeros((side, side), dtype=np.uint8)
    ys0, ys1 = max(0, y0), min(mask.shape[0], y0 + side)
    xs0, xs1 = max(0, x0), min(mask.shape[1], x0 + side)
    if ys1 > ys0 and xs1 > xs0:
        canvas[ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0] = mask[ys0:ys1, xs0:xs1] != 0
    out = cv2.resize(canvas, (FRAME, FRAME), interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)
