import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import disk_mask, to_rgb
from lakeplankton.features import (
    FEATURE_NAMES, NotFitted, TooFewSamples, extract_features, extra_shape_features,
    fit_ellipse, fit_standardizer, hu_moments, intensity_features, min_area_rect,
    read_feature_csv, shape_features, write_feature_csv, Standardizer,
)
from lakeplankton.imaging import extract_mask, trace_contour


def _mask_contour(bits):
    img = to_rgb(bits.astype(float) * 255)
    m = extract_mask(img)
    return m, trace_contour(m)


def _brute_hu(w):
    """Independent Hu oracle: explicit double loop over pixels."""
    h_, w_ = w.shape
    m00 = sum(w[y, x] for y in range(h_) for x in range(w_))
    cx = sum(x * w[y, x] for y in range(h_) for x in range(w_)) / m00
    cy = sum(y * w[y, x] for y in range(h_) for x in range(w_)) / m00

    def eta(p, q):
        mu = sum(((x - cx) ** p) * ((y - cy) ** q) * w[y, x] for y in range(h_) for x in range(w_))
        return mu / m00 ** (1 + (p + q) / 2)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    return np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11 ** 2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        (n30 + n12) ** 2 + (n21 + n03) ** 2,
        (n30 - 3 * n12) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2)
        + (3 * n21 - n03) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2),
        (n20 - n02) * ((n30 + n12) ** 2 - (n21 + n03) ** 2) + 4 * n11 * (n30 + n12) * (n21 + n03),
        (3 * n21 - n03) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2)
        - (n30 - 3 * n12) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2),
    ])


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-30))


def test_feature_names_unique_and_count():
    assert len(FEATURE_NAMES) == len(set(FEATURE_NAMES)) == 100


def test_hu_matches_brute_force():
    rng = np.random.default_rng(0)
    w = rng.random((9, 13)) * (rng.random((9, 13)) < 0.7)
    np.testing.assert_allclose(hu_moments(w), _brute_hu(w), rtol=1e-9, atol=1e-15)


def test_hu1_of_disk_near_continuous_value():
    # continuous disk: eta20 + eta02 = 1 / (2 pi)
    hu = hu_moments(disk_mask(50, supersample=2))
    assert hu[0] == pytest.approx(1 / (2 * math.pi), rel=1e-3)


def test_hu_translation_and_rot90():
    rng = np.random.default_rng(1)
    blob = np.zeros((40, 40))
    blob[8:20, 6:25] = rng.random((12, 19)) * 200 + 20
    moved = np.zeros((60, 60))
    moved[15:27, 11:30] = blob[8:20, 6:25]
    base = hu_moments(blob)
    assert _rel(hu_moments(moved), base) < 1e-6
    for k in (1, 2, 3):
        rot = hu_moments(np.rot90(blob, k))
        # odd-order invariant hu7 flips sign under reflection only, not rotation
        assert _rel(rot, base) < 1e-6


def test_disk_shape_features():
    bits = disk_mask(50) > 0
    m, c = _mask_contour(bits)
    shape, deg = shape_features(m, c)
    extra, _ = extra_shape_features(m, c)
    assert not deg
    assert 0.98 <= shape["eccentricity"] <= 1.0
    assert 0.95 <= shape["solidity"] <= 1.0
    assert 0.95 <= extra["compactness"] <= 1.15
    assert extra["convexity"] <= 1 + 1e-12


def test_rectangle_aspect_orientation_axes():
    bits = np.zeros((40, 30), bool)
    bits[5:25, 8:18] = True  # 10 wide, 20 tall
    m, c = _mask_contour(bits)
    shape, _ = shape_features(m, c)
    assert shape["aspect_ratio"] == 0.5
    assert shape["orientation"] == 90.0
    # discrete uniform variance (n^2 - 1) / 12 per axis
    assert shape["major_axis_length"] == pytest.approx(4 * math.sqrt(399 / 12))
    assert shape["minor_axis_length"] == pytest.approx(4 * math.sqrt(99 / 12))
    assert shape["solidity"] == pytest.approx(1.0)
    assert shape["area"] == 200


def test_orientation_sign_follows_screen_ccw():
    bits = np.eye(30, dtype=bool) | np.eye(30, k=1, dtype=bool)  # runs down-right
    fit = fit_ellipse(bits)
    assert fit.orientation_deg == pytest.approx(-45.0)
    assert fit_ellipse(bits[::-1]).orientation_deg == pytest.approx(45.0)


def test_square_contour_conventions():
    bits = np.zeros((20, 20), bool)
    bits[5:15, 5:15] = True
    m, c = _mask_contour(bits)
    extra, _ = extra_shape_features(m, c)
    assert extra["contour_area"] == 81.0
    assert extra["extent"] == 0.81
    assert extra["equivalent_diameter"] == pytest.approx(math.sqrt(4 * 81 / math.pi))
    assert extra["equivalent_diameter"] == pytest.approx(10.155, abs=1e-3)
    assert extra["contour_perimeter"] == 36.0
    assert extra["hull_area"] == 81.0
    assert (extra["rect_width"], extra["rect_height"], extra["rect_area"]) == (10, 10, 100)
    assert extra["moment_m00"] == 100
    assert extra["moment_mu11"] == pytest.approx(0, abs=1e-9)


def test_min_area_rect_of_rotated_square():
    s = 10 / math.sqrt(2)
    hull = np.array([(0, -s), (s, 0), (0, s), (-s, 0)])
    w, h, angle = min_area_rect(hull)
    assert w == pytest.approx(10) and h == pytest.approx(10)
    assert angle == pytest.approx(45.0)


def test_degenerate_shapes_zero_with_flag():
    bits = np.zeros((6, 12), bool)
    bits[3, 2:10] = True
    m, c = _mask_contour(bits)
    shape, d1 = shape_features(m, c)
    extra, d2 = extra_shape_features(m, c)
    assert d1 and d2
    assert set(shape.values()) == {0.0} and set(extra.values()) == {0.0}
    fv = extract_features(to_rgb(bits * 200.0))
    assert fv.degenerate and np.all(np.isfinite(fv.values))


def test_uniform_blob_intensity_brute_force():
    bits = np.zeros((25, 30), bool)
    bits[4:12, 6:20] = True
    bits[12:18, 6:10] = True
    img = to_rgb(bits * 120.0)
    m = extract_mask(img)
    feats = intensity_features(img, m, minor_len=4.0)
    ys, xs = np.nonzero(bits)
    first = (xs[0], ys[0])  # np.nonzero is row-major
    d = math.hypot(first[0] - xs.mean(), first[1] - ys.mean())
    for ch in ("gray", "red", "green", "blue"):
        assert feats[f"intensity_{ch}_std"] == pytest.approx(0, abs=1e-9)
        assert feats[f"intensity_{ch}_mass_displace"] == pytest.approx(d)
        assert feats[f"intensity_{ch}_mass_displace_in_images"] == pytest.approx(d / math.hypot(30, 25))
        assert feats[f"intensity_{ch}_mass_displace_in_minors"] == pytest.approx(d / 4)
    assert feats["intensity_red_mean"] == 120


def test_intensity_over_foreground_only():
    img = np.zeros((10, 10, 3), dtype=np.uint8)
    img[2:6, 2:6] = (100, 50, 200)
    img[4:6, 2:6, 0] = 140
    feats = intensity_features(img, extract_mask(img), minor_len=0.0)
    red = np.array([100] * 8 + [140] * 8, float)
    assert feats["intensity_red_mean"] == red.mean()
    assert feats["intensity_red_25_percentile"] == np.percentile(red, 25)
    assert feats["intensity_red_std"] == pytest.approx(red.std())
    gray = 0.299 * img[2:6, 2:6, 0] + 0.587 * 50 + 0.114 * 200
    assert feats["intensity_gray_mean"] == pytest.approx(gray.mean())
    assert feats["intensity_gray_mass_displace_in_minors"] == 0.0


def test_scale_powers():
    bits = disk_mask(12) > 0
    img = to_rgb(bits * 180.0)
    a = extract_features(img).as_dict()
    b = extract_features(img, scale=0.5).as_dict()
    assert b["area"] == pytest.approx(a["area"] * 0.25)
    assert b["major_axis_length"] == pytest.approx(a["major_axis_length"] * 0.5)
    assert b["estimated_volume"] == pytest.approx(a["estimated_volume"] * 0.125)
    for k in ("eccentricity", "solidity", "compactness", "orientation", "intensity_gray_mean"):
        assert b[k] == pytest.approx(a[k])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_bounds_on_random_blobs(seed):
    rng = np.random.default_rng(seed)
    bits = rng.random((20, 20)) < 0.6
    bits[[0, -1], :] = False
    bits[:, [0, -1]] = False
    if not bits.any():
        return
    img = to_rgb(bits * rng.uniform(20, 255, bits.shape))
    try:
        fv = extract_features(img)
    except ValueError:
        return
    f = fv.as_dict()
    assert np.all(np.isfinite(fv.values)) and len(fv.values) == len(FEATURE_NAMES)
    if fv.degenerate:
        return
    eps = 1e-9
    assert 0 <= f["solidity"] <= 1 + eps
    assert 0 <= f["extent"] <= 1 + eps
    assert f["compactness"] >= 1 - eps
    assert f["roundness"] <= 1 + eps
    assert f["convexity"] <= 1 + eps
    assert 0 <= f["eccentricity"] <= 1
    assert f["aspect_ratio"] > 0
    assert -90 < f["orientation"] <= 90


# --- standardizer -----------------------------------------------------------

def test_standardizer_values():
    x = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    s = fit_standardizer(x, names=("a", "b"))
    assert s.means.tolist() == [2.0, 5.0]
    assert s.stds[0] == pytest.approx(math.sqrt(2 / 3))
    assert s.constant.tolist() == [False, True]
    z = s.transform(x)
    assert np.all(z[:, 1] == 0)
    assert abs(z[:, 0].mean()) < 1e-9 and abs(z[:, 0].std() - 1) < 1e-9
    assert s.fit_split == "train"


def test_standardizer_guards(tmp_path):
    with pytest.raises(TooFewSamples):
        fit_standardizer(np.ones((1, 3)))
    with pytest.raises(NotFitted):
        Standardizer().transform(np.ones((2, 2)))
    s = fit_standardizer(np.random.default_rng(0).random((5, 3)), names=("a", "b", "c"))
    s.save(tmp_path / "s.json")
    t = Standardizer.load(tmp_path / "s.json")
    x = np.random.default_rng(1).random((4, 3))
    assert np.array_equal(s.transform(x), t.transform(x))


def test_feature_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    m = rng.normal(size=(3, 4)) * 1e3
    path = tmp_path / "f.csv"
    write_feature_csv(path, ["a/1.png", "a/2.png", "b/3.png"], ["a", "a", "b"], ["w", "x", "y", "z"], m,
                      comment="config_sha256=abc")
    lines = path.read_text().splitlines()
    assert lines[1] == "id,label,w,x,y,z"
    ids, labels, names, back = read_feature_csv(path)
    assert ids == ["a/1.png", "a/2.png", "b/3.png"] and labels == ["a", "a", "b"]
    assert list(names) == ["w", "x", "y", "z"]
    np.testing.assert_allclose(back, m, rtol=5e-9)


def _snowman(theta, supersample=2, size=120):
    """Asymmetric two-lobe coverage image rotated by ``theta`` radians."""
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    yy, xx = np.mgrid[:size, :size].astype(float)
    c = (size - 1) / 2
    ct, st_ = math.cos(theta), math.sin(theta)
    cover = np.zeros((size, size))
    for dy in off:
        for dx in off:
            x, y = xx + dx - c, yy + dy - c
            u, v = x * ct + y * st_, -x * st_ + y * ct
            cover += ((u / 40) ** 2 + (v / 18) ** 2 <= 1) | (((u - 30) / 14) ** 2 + ((v + 12) / 14) ** 2 <= 1)
    return cover / supersample ** 2


@settings(max_examples=12, deadline=None)
@given(theta=st.floats(0, 2 * math.pi))
def test_hu_stable_under_supersampled_rotation(theta):
    assert _rel(hu_moments(_snowman(theta)), hu_moments(_snowman(0.0))) < 5e-2
