"""Preprocessing tests: circle detection, crop geometry, color normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundusmil.preproc import (
    COLOR_OFFSET,
    COLOR_SIGMA,
    FRAME,
    MAPPED_CENTER,
    MAPPED_RADIUS,
    DiskGeometry,
    DiskNotFound,
    RawFundusImage,
    crop_pad_resize,
    detect_disk,
    normalize_color,
    preprocess_image,
    warp_mask_to_frame,
    zero_boundary,
)
from oracles import gaussian_blur_reference, render_circle

CENTER_TOL = 2.0  # px, in source coordinates
RADIUS_TOL = 0.03  # relative


def random_circle_case(rng):
    w = int(rng.integers(600, 1400))
    h = int(rng.integers(500, 1200))
    r = float(rng.uniform(0.21, 0.55)) * w
    r = min(r, 0.55 * h)  # keep a visible arc even when vertically clipped
    cy = float(rng.uniform(0.4, 0.6)) * h
    cx = float(rng.uniform(max(r * 0.8, 0.3 * w), min(w - r * 0.8, 0.7 * w)))
    return h, w, cy, cx, r


class TestDetectDisk:
    def test_known_circle_recovered(self):
        img = render_circle(800, 1000, 400.0, 500.0, 350.0)
        geom = detect_disk(RawFundusImage(pixels=img, source_id="known"))
        assert abs(geom.center_row - 400.0) <= CENTER_TOL
        assert abs(geom.center_col - 500.0) <= CENTER_TOL
        assert abs(geom.radius - 350.0) / 350.0 <= RADIUS_TOL

    def test_random_circles_recovered(self):
        rng = np.random.default_rng(7)
        for i in range(20):
            h, w, cy, cx, r = random_circle_case(rng)
            img = render_circle(h, w, cy, cx, r)
            geom = detect_disk(RawFundusImage(pixels=img, source_id=f"c{i}"))
            assert abs(geom.center_row - cy) <= CENTER_TOL, (i, h, w, cy, cx, r)
            assert abs(geom.center_col - cx) <= CENTER_TOL, (i, h, w, cy, cx, r)
            assert abs(geom.radius - r) / r <= RADIUS_TOL, (i, h, w, cy, cx, r)

    def test_translation_equivariance(self):
        base = render_circle(900, 1100, 450.0, 550.0, 330.0)
        moved = render_circle(900, 1100, 460.0, 543.0, 330.0)
        g0 = detect_disk(RawFundusImage(pixels=base, source_id="a"))
        g1 = detect_disk(RawFundusImage(pixels=moved, source_id="b"))
        assert abs((g1.center_row - g0.center_row) - 10.0) <= CENTER_TOL
        assert abs((g1.center_col - g0.center_col) - (-7.0)) <= CENTER_TOL

    def test_clipped_disk_detected(self):
        img = render_circle(600, 1000, 300.0, 500.0, 380.0)
        geom = detect_disk(RawFundusImage(pixels=img, source_id="clip"))
        assert abs(geom.center_row - 300.0) <= CENTER_TOL
        assert abs(geom.radius - 380.0) / 380.0 <= RADIUS_TOL

    def test_constant_image_rejected(self):
        img = np.zeros((400, 400, 3), dtype=np.float32)
        with pytest.raises(DiskNotFound):
            detect_disk(RawFundusImage(pixels=img, source_id="flat"))

    def test_noise_image_rejected(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 255, (500, 640, 3)).astype(np.float32)
        with pytest.raises(DiskNotFound):
            detect_disk(RawFundusImage(pixels=img, source_id="noise"))

    def test_radius_below_search_window_rejected(self):
        # radius 0.1 x width sits under the sweep floor of 0.2 x width
        img = render_circle(800, 1000, 400.0, 500.0, 100.0)
        with pytest.raises(DiskNotFound):
            detect_disk(RawFundusImage(pixels=img, source_id="small"))

    def test_too_small_input_rejected(self):
        img = np.zeros((32, 128, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            RawFundusImage(pixels=img, source_id="tiny")


class TestCropPadResize:
    def test_shapes_and_dtypes(self):
        img = render_circle(800, 1000, 400.0, 500.0, 350.0)
        raw = RawFundusImage(pixels=img, source_id="t")
        geom = detect_disk(raw)
        image512, mask512 = crop_pad_resize(raw, geom)
        assert image512.shape == (FRAME, FRAME, 3)
        assert image512.dtype == np.float32
        assert mask512.shape == (FRAME, FRAME)
        assert mask512.dtype == np.bool_

    def test_unclipped_mask_coverage_is_quarter_pi(self):
        img = render_circle(800, 1000, 400.0, 500.0, 350.0)
        raw = RawFundusImage(pixels=img, source_id="t")
        _, mask512 = crop_pad_resize(raw, detect_disk(raw))
        assert abs(mask512.mean() - np.pi / 4) <= 0.02

    def test_clipped_mask_loses_padded_rows(self):
        img = render_circle(600, 1000, 300.0, 500.0, 380.0)
        raw = RawFundusImage(pixels=img, source_id="clip")
        image512, mask512 = crop_pad_resize(raw, detect_disk(raw))
        assert mask512.mean() < np.pi / 4 - 0.02
        # padded strips carry no retina and no intensity
        assert not mask512[0].any() and not mask512[-1].any()
        assert float(np.abs(image512[0]).max()) == 0.0

    def test_mask_matches_exact_geometry(self):
        # with geometry supplied directly, the mask is the mapped disk
        img = np.full((700, 700, 3), 50, dtype=np.float32)
        raw = RawFundusImage(pixels=img, source_id="g")
        geom = DiskGeometry(center_row=350.0, center_col=350.0, radius=200.0)
        _, mask512 = crop_pad_resize(raw, geom)
        yy = np.arange(FRAME) - MAPPED_CENTER
        analytic = yy[:, None] ** 2 + yy[None, :] ** 2 <= MAPPED_RADIUS**2
        disagree = np.logical_xor(mask512, analytic).mean()
        assert disagree < 0.005


class TestNormalizeColor:
    def test_matches_naive_convolution(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 255, (FRAME, FRAME, 3)).astype(np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        out = normalize_color(img, mask)
        blur = gaussian_blur_reference(img, COLOR_SIGMA)
        expect = np.clip(4.0 * (img.astype(np.float64) - blur) + COLOR_OFFSET, 0, 255)
        np.testing.assert_allclose(out, expect, atol=1e-3)

    def test_constant_image_maps_to_offset(self):
        img = np.full((FRAME, FRAME, 3), 77.0, dtype=np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        out = normalize_color(img, mask)
        np.testing.assert_allclose(out, COLOR_OFFSET, atol=1e-4)

    def test_outside_mask_set_to_offset(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 255, (FRAME, FRAME, 3)).astype(np.float32)
        mask = np.zeros((FRAME, FRAME), dtype=bool)
        mask[100:400, 100:400] = True
        out = normalize_color(img, mask)
        assert (out[~mask] == COLOR_OFFSET).all()

    def test_output_range(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 255, (FRAME, FRAME, 3)).astype(np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        out = normalize_color(img, mask)
        assert out.min() >= 0.0 and out.max() <= 255.0


class TestZeroBoundary:
    def _dist(self):
        yy = np.arange(FRAME) - MAPPED_CENTER
        return np.sqrt(yy[:, None] ** 2 + yy[None, :] ** 2)

    def test_annulus_zeroed_interior_kept(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(1, 255, (FRAME, FRAME, 3)).astype(np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        pre = zero_boundary(img, mask, 0.05)
        dist = self._dist()
        outer = dist > 0.95 * MAPPED_RADIUS
        inner = dist <= 0.95 * MAPPED_RADIUS
        assert (pre.image[outer] == 0).all()
        assert not pre.retina_mask[outer].any()
        np.testing.assert_array_equal(pre.image[inner], img[inner])
        assert pre.retina_mask[inner].all()

    def test_fraction_zero_keeps_disk_interior(self):
        rng = np.random.default_rng(8)
        img = rng.uniform(1, 255, (FRAME, FRAME, 3)).astype(np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        pre = zero_boundary(img, mask, 0.0)
        inside = self._dist() <= MAPPED_RADIUS
        np.testing.assert_array_equal(pre.image[inside], img[inside])

    def test_specific_radii(self):
        img = np.full((FRAME, FRAME, 3), 9.0, dtype=np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        pre = zero_boundary(img, mask, 0.05)
        dist = self._dist()
        at_096 = np.abs(dist - 0.96 * MAPPED_RADIUS) < 0.5
        at_090 = np.abs(dist - 0.90 * MAPPED_RADIUS) < 0.5
        assert (pre.image[at_096] == 0).all()
        assert (pre.image[at_090] == 9.0).all()

    @settings(max_examples=10, deadline=None)
    @given(st.floats(min_value=0.0, max_value=0.5))
    def test_idempotent(self, fraction):
        rng = np.random.default_rng(11)
        img = rng.uniform(0, 255, (FRAME, FRAME, 3)).astype(np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        once = zero_boundary(img, mask, fraction)
        twice = zero_boundary(once.image, once.retina_mask, fraction)
        np.testing.assert_array_equal(once.image, twice.image)
        np.testing.assert_array_equal(once.retina_mask, twice.retina_mask)

    def test_bad_fraction_rejected(self):
        img = np.zeros((FRAME, FRAME, 3), dtype=np.float32)
        mask = np.ones((FRAME, FRAME), dtype=bool)
        with pytest.raises(ValueError):
            zero_boundary(img, mask, 1.0)


class TestFullPipeline:
    def test_invariants_on_clean_circle(self):
        img = render_circle(800, 1000, 400.0, 500.0, 350.0)
        pre = preprocess_image(RawFundusImage(pixels=img, source_id="full"))
        assert pre.image.shape == (FRAME, FRAME, 3)
        assert pre.retina_mask.shape == (FRAME, FRAME)
        assert abs(pre.retina_mask.mean() - np.pi / 4 * 0.95**2) <= 0.02
        # anything outside the mask is either padding (0) or the offset
        off = pre.image[~pre.retina_mask]
        assert np.isin(off, [0.0, COLOR_OFFSET]).all()
        assert pre.source_id == "full"

    def test_clipped_pipeline_coverage_lower(self):
        img = render_circle(600, 1000, 300.0, 500.0, 380.0)
        pre = preprocess_image(RawFundusImage(pixels=img, source_id="clip"))
        assert pre.retina_mask.mean() < np.pi / 4 * 0.95**2 - 0.02

    def test_sigma_constant(self):
        assert COLOR_SIGMA == pytest.approx(MAPPED_RADIUS / 30.0)


class TestWarpMask:
    def test_disk_mask_maps_to_frame_disk(self):
        h, w, cy, cx, r = 800, 1000, 400.0, 500.0, 350.0
        yy, xx = np.mgrid[0:h, 0:w]
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        geom = DiskGeometry(center_row=cy, center_col=cx, radius=r)
        warped = warp_mask_to_frame(disk, geom)
        assert warped.dtype == np.bool_
        yy2 = np.arange(FRAME) - MAPPED_CENTER
        analytic = yy2[:, None] ** 2 + yy2[None, :] ** 2 <= MAPPED_RADIUS**2
        inter = np.logical_and(warped, analytic).sum()
        union = np.logical_or(warped, analytic).sum()
        assert inter / union > 0.98

    def test_empty_mask_stays_empty(self):
        geom = DiskGeometry(center_row=100.0, center_col=100.0, radius=80.0)
        warped = warp_mask_to_frame(np.zeros((200, 200), dtype=bool), geom)
        assert not warped.any()
