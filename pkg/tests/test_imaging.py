import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image as PILImage

from shadowad.errors import DataError, ValidationError
from shadowad.imaging import (
    LINEAR,
    LOG,
    Image,
    boundary_bands,
    boundary_pixels,
    default_band_radius,
    dilate,
    distance_to_boundary,
    erode,
    from_log_space,
    load_image,
    load_mask,
    resize_array,
    resize_image,
    resize_mask,
    save_image,
    save_mask,
    to_log_space,
)

masks16 = arrays(bool, (16, 16))


def brute_distance(mask):
    """O(N^2) nearest-boundary search; boundary = shadow pixels with a non-shadow 4-neighbour."""
    h, w = mask.shape
    boundary = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if 0 <= a < h and 0 <= b < w and not mask[a, b]:
                    boundary.append((i, j))
                    break
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = min(math.sqrt((i - a) ** 2 + (j - b) ** 2) for a, b in boundary)
    return out


def brute_dilate(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            out[i, j] = mask[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1].any()
    return out


# ----------------------------------------------------------------------- PNG I/O


def test_load_image_decodes_8bit(tmp_path):
    p = tmp_path / "px.png"
    PILImage.fromarray(np.array([[[255, 0, 128]]], dtype=np.uint8), "RGB").save(p)
    img = load_image(p)
    assert img.domain == LINEAR
    np.testing.assert_array_equal(img.data[0, 0], [1.0, 0.0, 128 / 255])


def test_image_round_trip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
    src = tmp_path / "a.png"
    PILImage.fromarray(raw, "RGB").save(src)
    dst = tmp_path / "b.png"
    save_image(load_image(src), dst)
    np.testing.assert_array_equal(np.asarray(PILImage.open(dst)), raw)


def test_load_image_rejects_gray(tmp_path):
    p = tmp_path / "g.png"
    PILImage.fromarray(np.zeros((4, 4), np.uint8), "L").save(p)
    with pytest.raises(DataError, match="non-RGB input"):
        load_image(p)


def test_load_image_missing_file(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_image(tmp_path / "nope.png")


def test_save_rejects_log_image(tmp_path):
    with pytest.raises(ValidationError):
        save_image(Image(np.zeros((2, 2, 3)), LOG), tmp_path / "x.png")


def test_mask_threshold_is_strict(tmp_path):
    p = tmp_path / "m.png"
    PILImage.fromarray(np.array([[200, 10, 127, 128]], np.uint8), "L").save(p)
    np.testing.assert_array_equal(load_mask(p), [[True, False, False, True]])


def test_mask_round_trip_idempotent(tmp_path):
    p = tmp_path / "m.png"
    PILImage.fromarray(np.array([[200, 10], [127, 255]], np.uint8), "L").save(p)
    q, r = tmp_path / "q.png", tmp_path / "r.png"
    save_mask(load_mask(p), q)
    save_mask(load_mask(q), r)
    assert q.read_bytes() == r.read_bytes()
    assert set(np.unique(np.asarray(PILImage.open(q)))) <= {0, 255}


def test_load_mask_rejects_rgb(tmp_path):
    p = tmp_path / "c.png"
    PILImage.fromarray(np.zeros((3, 3, 3), np.uint8), "RGB").save(p)
    with pytest.raises(DataError, match="non-grayscale"):
        load_mask(p)


# --------------------------------------------------------------------- log space


def test_log_space_values():
    img = Image(np.array([[[1.0, 0.0, 0.5]]]))
    out = to_log_space(img)
    assert out.domain == LOG
    assert out.data[0, 0, 0] == 0.0
    assert out.data[0, 0, 1] == pytest.approx(-5.541263545158426, abs=1e-12)
    assert out.data[0, 0, 2] == pytest.approx(math.log(0.5))


def test_log_space_rejects_double_application():
    with pytest.raises(ValidationError):
        to_log_space(to_log_space(Image(np.ones((2, 2, 3)))))
    with pytest.raises(ValidationError):
        from_log_space(Image(np.ones((2, 2, 3))))


@given(arrays(np.float64, (5, 4, 3), elements=st.floats(1 / 255, 1.0)))
def test_log_round_trip(values):
    back = from_log_space(to_log_space(Image(values)))
    np.testing.assert_allclose(back.data, values, atol=1e-6)


# ---------------------------------------------------------------------- resizing


def test_resize_identity():
    data = np.random.default_rng(0).random((8, 9, 3))
    np.testing.assert_array_equal(resize_image(Image(data), 8, 9).data, data)


@pytest.mark.parametrize("size", [(3, 5), (8, 8), (17, 2)])
def test_resize_constant(size):
    out = resize_array(np.full((2, 2, 3), 0.37), *size)
    np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-15)


def test_resize_hand_weights():
    # output centres map to source rows -0.25, 0.25, 0.75, 1.25 (clamped at the ends)
    out = resize_array(np.array([[0.0], [1.0]]), 4, 1)
    np.testing.assert_allclose(out[:, 0], [0.0, 0.25, 0.75, 1.0])


def test_resize_rejects_zero():
    with pytest.raises(ValidationError):
        resize_array(np.zeros((4, 4)), 0, 4)


def test_resize_mask_nearest():
    m = np.array([[True, False], [False, True]])
    out = resize_mask(m, 4, 4)
    np.testing.assert_array_equal(out, np.kron(m, np.ones((2, 2), bool)))


# -------------------------------------------------------------------- morphology


def test_dilate_single_pixel():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    expected = np.zeros((7, 7), bool)
    expected[2:5, 2:5] = True
    np.testing.assert_array_equal(dilate(m, 1), expected)


def test_erode_block():
    m = np.zeros((7, 7), bool)
    m[2:5, 2:5] = True
    expected = np.zeros((7, 7), bool)
    expected[3, 3] = True
    np.testing.assert_array_equal(erode(m, 1), expected)


def test_radius_zero_rejected():
    with pytest.raises(ValidationError):
        dilate(np.ones((3, 3), bool), 0)


def test_erode_treats_outside_as_false():
    assert not erode(np.ones((5, 5), bool), 1)[0].any()


@settings(max_examples=50)
@given(masks16, st.integers(1, 3))
def test_dilate_matches_brute_force(m, r):
    np.testing.assert_array_equal(dilate(m, r), brute_dilate(m, r))


@settings(max_examples=50)
@given(masks16)
def test_closing_superset(m):
    # out-of-image pixels count as false, so the closing is only extensive away from the border
    closed = erode(dilate(m, 1), 1)
    inner = np.zeros_like(m)
    inner[1:-1, 1:-1] = True
    assert np.all(closed[inner] >= m[inner])


@settings(max_examples=50)
@given(masks16, st.integers(1, 2))
def test_duality(m, r):
    np.testing.assert_array_equal(dilate(m, r), ~erode(~m, r, border_value=True))


def test_boundary_bands_block():
    m = np.zeros((8, 8), bool)
    m[2:6, 2:6] = True
    b_in, b_out = boundary_bands(m, 1)
    ring_in = m.copy()
    ring_in[3:5, 3:5] = False
    ring_out = np.zeros((8, 8), bool)
    ring_out[1:7, 1:7] = True
    ring_out[2:6, 2:6] = False
    np.testing.assert_array_equal(b_in, ring_in)
    np.testing.assert_array_equal(b_out, ring_out)
    assert b_in.sum() == 12 and b_out.sum() == 20


def test_boundary_bands_full_mask():
    with pytest.raises(ValidationError, match="degenerate band"):
        boundary_bands(np.ones((8, 8), bool), 1)


@settings(max_examples=50)
@given(masks16, st.integers(1, 3))
def test_bands_disjoint_and_adjacent(m, r):
    if not m.any():
        return
    try:
        b_in, b_out = boundary_bands(m, r)
    except ValidationError:
        return
    assert not (b_in & b_out).any()
    # every outer-band pixel lies within Chebyshev distance r of the mask
    assert np.all(brute_dilate(m, r)[b_out])


def test_default_band_radius():
    assert default_band_radius(256, 256) == 5
    assert default_band_radius(64, 64) == 1
    assert default_band_radius(8, 8) == 1
    assert default_band_radius(512, 300) == 6


# ------------------------------------------------------------ boundary distances


def test_distance_zero_on_boundary_and_one_next_to_it():
    m = np.zeros((9, 9), bool)
    m[2:7, 2:7] = True
    d = distance_to_boundary(m)
    assert np.all(d[boundary_pixels(m)] == 0)
    assert d[3, 3] == 1.0
    assert d[1, 4] == 1.0


def test_distance_uniform_mask_rejected():
    with pytest.raises(ValidationError):
        distance_to_boundary(np.zeros((5, 5), bool))
    with pytest.raises(ValidationError):
        distance_to_boundary(np.ones((5, 5), bool))


@settings(max_examples=30, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 32), st.integers(1, 32))))
def test_distance_matches_brute_force(m):
    if not boundary_pixels(m).any():
        return
    np.testing.assert_array_equal(distance_to_boundary(m), brute_distance(m))


def test_distance_transpose_symmetry():
    rng = np.random.default_rng(5)
    m = rng.random((16, 16)) < 0.4
    m = m | m.T
    np.testing.assert_array_equal(distance_to_boundary(m), distance_to_boundary(m).T)
