import numpy as np
import pytest

from aftn.geometry import (
    FRAME,
    SEARCH,
    CropWindow,
    FrameImage,
    SpaceMismatchError,
    SquareBox,
    context_window,
    crop_resize,
    decode_output,
    encode_target,
    region_overlap,
    to_frame_coords,
    to_search_coords,
)


def raster_iou(a, b, res=8):
    """Discretized IoU: count subpixel grid points inside each square."""
    step = 1.0 / res

    def axis_count(lo, hi):
        if hi <= lo:
            return 0
        return max(0, int(np.ceil(hi / step - 0.5)) - int(np.ceil(lo / step - 0.5)))

    def box_span(box):
        return (box.cx - box.side / 2, box.cx + box.side / 2,
                box.cy - box.side / 2, box.cy + box.side / 2)

    ax1, ax2, ay1, ay2 = box_span(a)
    bx1, bx2, by1, by2 = box_span(b)
    inter = axis_count(max(ax1, bx1), min(ax2, bx2)) * axis_count(max(ay1, by1), min(ay2, by2))
    na = axis_count(ax1, ax2) * axis_count(ay1, ay2)
    nb = axis_count(bx1, bx2) * axis_count(by1, by2)
    union = na + nb - inter
    return inter / union if union else 0.0


def bilinear_oracle(frame, window, mean, size):
    """Direct per-pixel interpolation, written independently of the kernel."""
    h, w = frame.shape[:2]
    out = np.empty((size, size, 3))
    for i in range(size):
        for j in range(size):
            fy = window.top + (i + 0.5) * window.side / size - 0.5
            fx = window.left + (j + 0.5) * window.side / size - 0.5
            y0, x0 = int(np.floor(fy)), int(np.floor(fx))
            wy, wx = fy - y0, fx - x0
            acc = np.zeros(3)
            for dy, ky in ((0, 1 - wy), (1, wy)):
                for dx, kx in ((0, 1 - wx), (1, wx)):
                    yy, xx = y0 + dy, x0 + dx
                    val = frame[yy, xx] if 0 <= yy < h and 0 <= xx < w else mean
                    acc += ky * kx * np.asarray(val, dtype=np.float64)
            out[i, j] = acc - mean
    return out


class TestRegionOverlap:
    def test_identical(self):
        a = SquareBox(10, 20, 8)
        assert region_overlap(a, SquareBox(10, 20, 8)) == 1.0

    def test_disjoint(self):
        assert region_overlap(SquareBox(0, 0, 4), SquareBox(100, 100, 4)) == 0.0

    def test_corner_aligned_quarter_overlap(self):
        got = region_overlap(SquareBox(5, 5, 10), SquareBox(10, 10, 10))
        assert abs(got - 25.0 / 175.0) < 1e-12
        assert abs(got - raster_iou(SquareBox(5, 5, 10), SquareBox(10, 10, 10), res=16)) < 0.005

    def test_space_mismatch(self):
        with pytest.raises(SpaceMismatchError):
            region_overlap(SquareBox(0, 0, 2), SquareBox(0, 0, 2, SEARCH))

    def test_symmetry_and_range(self, rng):
        for _ in range(200):
            a = SquareBox(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(8, 30))
            b = SquareBox(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(8, 30))
            ab = region_overlap(a, b)
            assert region_overlap(b, a) == ab
            assert 0.0 <= ab <= 1.0
            assert (ab == 1.0) == (a == b)

    def test_matches_rasterization(self, rng):
        for _ in range(300):
            a = SquareBox(rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(8, 40))
            b = SquareBox(rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(8, 40))
            assert abs(region_overlap(a, b) - raster_iou(a, b)) < 0.02

    def test_translation_and_scale_invariance(self, rng):
        for _ in range(100):
            a = SquareBox(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30))
            b = SquareBox(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30))
            base = region_overlap(a, b)
            dx, dy, s = rng.uniform(-90, 90), rng.uniform(-90, 90), rng.uniform(0.5, 4)
            moved = region_overlap(
                SquareBox(a.cx + dx, a.cy + dy, a.side),
                SquareBox(b.cx + dx, b.cy + dy, b.side),
            )
            scaled = region_overlap(
                SquareBox(a.cx * s, a.cy * s, a.side * s),
                SquareBox(b.cx * s, b.cy * s, b.side * s),
            )
            assert abs(moved - base) < 1e-9
            assert abs(scaled - base) < 1e-9

    def test_side_must_be_positive(self):
        with pytest.raises(ValueError):
            SquareBox(0, 0, 0)


class TestContextWindow:
    def test_centered_double(self):
        win = context_window(SquareBox(100, 100, 50), 800, 600)
        assert (win.left, win.top, win.side) == (50, 50, 100)

    def test_corner_box_extends_outside(self):
        win = context_window(SquareBox(0, 0, 40), 800, 600)
        assert (win.left, win.top, win.side) == (-40, -40, 80)

    def test_half_frame_box_covers_frame(self):
        win = context_window(SquareBox(160, 120, 160), 320, 240)
        assert win.left == 0 and win.side == 320

    def test_needs_frame_space(self):
        with pytest.raises(SpaceMismatchError):
            context_window(SquareBox(0, 0, 4, SEARCH), 320, 240)


class TestCropResize:
    def test_exact_frame_window_is_identity(self, rng):
        px = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        frame = FrameImage(px)
        win = CropWindow(0, 0, 16, 16, 16)
        patch = crop_resize(frame, win, np.zeros(3), size=16)
        np.testing.assert_allclose(patch.pixels, px.astype(np.float64), atol=1e-9)

    def test_mean_colored_frame_gives_zero_patch(self):
        mean = np.array([90.0, 120.0, 150.0])
        px = np.ones((12, 12, 3)) * mean
        patch = crop_resize(FrameImage(px), CropWindow(2, 2, 6, 12, 12), mean, size=8)
        np.testing.assert_allclose(patch.pixels, 0.0, atol=1e-9)

    def test_checkerboard_upsample_matches_oracle(self):
        px = np.zeros((2, 2, 3))
        px[0, 1] = px[1, 0] = 255.0
        frame = FrameImage(px)
        win = CropWindow(0, 0, 2, 2, 2)
        mean = np.array([10.0, 20.0, 30.0])
        patch = crop_resize(frame, win, mean, size=4)
        expected = bilinear_oracle(px, win, mean, 4)
        np.testing.assert_allclose(patch.pixels, expected, atol=1e-9)

    def test_out_of_frame_region_is_zero(self, rng):
        px = rng.integers(0, 256, size=(10, 10, 3)).astype(np.uint8)
        mean = np.array([50.0, 60.0, 70.0])
        patch = crop_resize(FrameImage(px), CropWindow(-20, -20, 10, 10, 10), mean, size=6)
        np.testing.assert_allclose(patch.pixels, 0.0, atol=1e-9)

    def test_invariant_to_content_outside_window(self, rng):
        px = rng.integers(0, 256, size=(20, 20, 3)).astype(np.uint8)
        altered = px.copy()
        altered[:3, :] = 0
        altered[:, 15:] = 255
        win = CropWindow(5, 5, 8, 20, 20)
        mean = np.zeros(3)
        a = crop_resize(FrameImage(px), win, mean, size=8)
        b = crop_resize(FrameImage(altered), win, mean, size=8)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_random_windows_match_oracle(self, rng):
        px = rng.integers(0, 256, size=(15, 17, 3)).astype(np.uint8)
        mean = np.array([100.0, 110.0, 120.0])
        for _ in range(10):
            win = CropWindow(rng.uniform(-5, 12), rng.uniform(-5, 10),
                             rng.uniform(2, 20), 17, 15)
            patch = crop_resize(FrameImage(px), win, mean, size=7)
            expected = bilinear_oracle(px.astype(np.float64), win, mean, 7)
            np.testing.assert_allclose(patch.pixels, expected, atol=1e-9)

    def test_degenerate_window(self):
        with pytest.raises(ValueError):
            crop_resize(FrameImage(np.zeros((4, 4, 3))), CropWindow(0, 0, 0, 4, 4), np.zeros(3))


class TestCoordTransforms:
    def test_known_mapping(self):
        win = CropWindow(50, 50, 100, 800, 600)
        got = to_search_coords(SquareBox(100, 100, 50), win, 224)
        assert got.space == SEARCH
        np.testing.assert_allclose([got.cx, got.cy, got.side], [112, 112, 112], atol=1e-9)

    def test_centered_box_maps_to_center(self, rng):
        for _ in range(20):
            side = rng.uniform(5, 80)
            box = SquareBox(rng.uniform(50, 400), rng.uniform(50, 400), side)
            win = context_window(box, 800, 600)
            got = to_search_coords(box, win, 224)
            assert abs(got.cx - 112) < 1e-9 and abs(got.cy - 112) < 1e-9

    def test_round_trip(self, rng):
        for _ in range(200):
            box = SquareBox(rng.uniform(-50, 400), rng.uniform(-50, 300), rng.uniform(1, 100))
            win = CropWindow(rng.uniform(-100, 200), rng.uniform(-100, 200),
                             rng.uniform(10, 300), 800, 600)
            back = to_frame_coords(to_search_coords(box, win, 224), win, 224)
            assert abs(back.cx - box.cx) < 1e-9
            assert abs(back.cy - box.cy) < 1e-9
            assert abs(back.side - box.side) < 1e-9


class TestEncodeDecode:
    def test_center_box(self):
        vec = encode_target(SquareBox(112, 112, 112, SEARCH), 224)
        np.testing.assert_allclose(vec, [0.5, 0.5, 0.5])

    def test_round_trip(self, rng):
        for _ in range(50):
            box = SquareBox(rng.uniform(0, 224), rng.uniform(0, 224),
                            rng.uniform(1, 224), SEARCH)
            back = decode_output(encode_target(box, 224), 224)
            assert abs(back.cx - box.cx) < 1e-9
            assert abs(back.cy - box.cy) < 1e-9
            assert abs(back.side - box.side) < 1e-9

    def test_side_clamped_to_one_pixel(self):
        box = decode_output(np.array([0.5, 0.5, 0.001]), 224)
        assert box.side == 1.0

    def test_encode_needs_search_space(self):
        with pytest.raises(SpaceMismatchError):
            encode_target(SquareBox(1, 1, 1, FRAME), 224)
