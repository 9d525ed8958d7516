"""Shared raster types, morphology, metrics, windowed statistics, file I/O."""
import numpy as np
import pytest

from forgeloc.imgcore import (
    LUMA_WEIGHTS,
    MaskSource,
    Plane,
    RgbImage,
    TamperMask,
    comparison_overlay,
    disc_element,
    f_measure,
    load_image,
    load_mask,
    mask_roundtrip,
    mask_scores,
    morph_clean,
    read_manifest,
    save_image,
    save_mask,
    warp_rotate_scale,
    warp_support,
    windowed_pearson,
    write_manifest,
    write_metrics_csv,
)

from _oracles import disc_morphology, window_pearson_direct


def _mask(bits):
    return TamperMask(np.asarray(bits, dtype=bool), MaskSource.TRUTH)


# --- types ---

def test_plane_rejects_non_finite():
    with pytest.raises(ValueError):
        Plane(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        Plane(np.ones(4))


def test_rgb_image_validation():
    with pytest.raises(ValueError):
        RgbImage(Plane(np.zeros((4, 4))), Plane(np.zeros((4, 5))),
                 Plane(np.zeros((4, 4))))
    with pytest.raises(ValueError):
        RgbImage.from_array(np.full((4, 4, 3), 256.0))
    img = RgbImage.from_array(np.full((4, 4, 3), 255.0))
    assert img.shape == (4, 4)


def test_luminance_weights():
    arr = np.zeros((2, 2, 3))
    arr[..., 0] = 100.0
    arr[..., 1] = 50.0
    arr[..., 2] = 10.0
    lum = RgbImage.from_array(arr).luminance()
    expect = 100.0 * LUMA_WEIGHTS[0] + 50.0 * LUMA_WEIGHTS[1] + 10.0 * LUMA_WEIGHTS[2]
    assert np.allclose(lum.data, expect)


def test_tamper_mask_requires_source():
    with pytest.raises(ValueError):
        TamperMask(np.zeros((3, 3), dtype=bool), "prnu")
    assert _mask(np.zeros((3, 3))).is_empty()


# --- morphology ---

def test_disc_element_shapes():
    assert disc_element(0).shape == (1, 1)
    el = disc_element(2)
    assert el.shape == (5, 5)
    assert not el[0, 0] and el[0, 2] and el[2, 2]


def test_morph_clean_empty_fixed_point():
    m = _mask(np.zeros((32, 32)))
    assert morph_clean(m, 2, 64).is_empty()


def test_morph_clean_single_pixel_below_floor():
    bits = np.zeros((16, 16), dtype=bool)
    bits[8, 8] = True
    out = morph_clean(_mask(bits), 0, 2)
    assert out.is_empty()


def test_morph_clean_square_against_direct_morphology():
    bits = np.zeros((120, 120), dtype=bool)
    bits[10:110, 10:110] = True
    got = morph_clean(bits, 2, 500)
    want = disc_morphology(bits, 2, 500)
    assert np.array_equal(got, want)
    # and the square survives within a 2-pixel boundary band
    assert got[12:108, 12:108].all()
    assert not got[:8, :].any() and not got[:, :8].any()


def test_morph_clean_idempotent():
    rng = np.random.default_rng(7)
    for _ in range(10):
        bits = rng.random((48, 48)) < 0.4
        once = morph_clean(bits, 2, 0)
        assert np.array_equal(once, morph_clean(once, 2, 0))
        full = morph_clean(bits, 2, 64)
        assert np.array_equal(full, morph_clean(full, 2, 64))


def test_morph_clean_random_masks_match_direct_morphology():
    rng = np.random.default_rng(3)
    for _ in range(5):
        bits = rng.random((40, 40)) < 0.45
        got = morph_clean(bits, 1, 20)
        want = bits
        for _ in range(8):
            prev = want
            want = disc_morphology(want, 1, 20)
            if np.array_equal(want, prev):
                break
        assert np.array_equal(got, want)


def test_morph_clean_rejects_bad_args():
    with pytest.raises(ValueError):
        morph_clean(np.zeros((4, 4), dtype=bool), -1, 0)
    with pytest.raises(ValueError):
        morph_clean(np.zeros((4, 4), dtype=bool), 0, -1)


# --- metrics ---

def test_f_measure_perfect_match():
    bits = np.zeros((10, 10), dtype=bool)
    bits[2:5, 2:5] = True
    assert f_measure(_mask(bits), _mask(bits)) == 1.0


def test_f_measure_disjoint():
    a = np.zeros((10, 10), dtype=bool)
    b = np.zeros((10, 10), dtype=bool)
    a[0, 0] = True
    b[5, 5] = True
    assert f_measure(a, b) == 0.0


def test_f_measure_half_recall():
    truth = np.zeros((4, 4), dtype=bool)
    truth[0, 0] = truth[0, 1] = True
    pred = np.zeros((4, 4), dtype=bool)
    pred[0, 0] = True
    p, r, f = mask_scores(pred, truth)
    assert p == 1.0 and r == 0.5
    assert abs(f - 2.0 / 3.0) < 1e-12


def test_f_measure_degenerate_conventions():
    empty = np.zeros((6, 6), dtype=bool)
    some = empty.copy()
    some[1, 1] = True
    assert f_measure(empty, empty) == 1.0
    assert f_measure(some, empty) == 0.0
    assert f_measure(empty, some) == 0.0


def test_f_measure_symmetric():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = rng.random((12, 12)) < 0.3
        b = rng.random((12, 12)) < 0.3
        assert f_measure(a, b) == pytest.approx(f_measure(b, a), abs=1e-12)


def test_mask_scores_dimension_mismatch():
    with pytest.raises(ValueError):
        mask_scores(np.zeros((3, 3), dtype=bool), np.zeros((4, 4), dtype=bool))


# --- sliding-window pearson ---

def test_windowed_pearson_matches_direct_recomputation():
    rng = np.random.default_rng(5)
    a = rng.normal(0.0, 1.0, (64, 64))
    b = 0.4 * a + rng.normal(0.0, 1.0, (64, 64))
    got = windowed_pearson(a, b, 17)
    want = window_pearson_direct(a, b, 17)
    assert np.max(np.abs(got - want)) < 1e-9


def test_windowed_pearson_flat_window_is_zero():
    a = np.zeros((20, 20))
    b = np.random.default_rng(0).normal(size=(20, 20))
    assert np.all(windowed_pearson(a, b, 5) == 0.0)


def test_windowed_pearson_identical_inputs():
    a = np.random.default_rng(1).normal(size=(30, 30))
    rho = windowed_pearson(a, a, 7)
    assert np.allclose(rho, 1.0)


# --- warps ---

def test_warp_rot90_is_exact():
    arr = np.arange(30.0).reshape(5, 6)
    warped, lin, off = warp_rotate_scale(arr, 90.0, 1.0)
    assert np.array_equal(warped, np.rot90(arr))
    # the returned affine maps input coords onto output coords
    p = np.array([0.0, 0.0])
    u = lin @ p + off
    assert warped[int(round(u[0])), int(round(u[1]))] == arr[0, 0]


def test_warp_identity():
    arr = np.random.default_rng(2).uniform(0, 255, (16, 16))
    warped, lin, off = warp_rotate_scale(arr, 0.0, 1.0)
    assert np.array_equal(warped, arr)
    assert np.allclose(lin, np.eye(2)) and np.allclose(off, 0.0)


def test_warp_scale_support():
    sup = warp_support((40, 40), 0.0, 1.25)
    assert sup.shape[0] >= 49 and sup.any()
    with pytest.raises(ValueError):
        warp_rotate_scale(np.zeros((8, 8)), 0.0, 0.0)


# --- file round-trips ---

def test_mask_roundtrip_all_false_and_all_true():
    for fill in (False, True):
        m = _mask(np.full((8, 8), fill))
        back = mask_roundtrip(m)
        assert np.array_equal(back.bits, m.bits)
        assert back.source is m.source


def test_mask_roundtrip_random_seeded():
    for seed in range(6):
        bits = np.random.default_rng(seed).random((33, 17)) < 0.5
        back = mask_roundtrip(_mask(bits))
        assert np.array_equal(back.bits, bits)


def test_image_roundtrip(tmp_path):
    arr = np.random.default_rng(3).integers(0, 256, (21, 13, 3)).astype(float)
    img = RgbImage.from_array(arr)
    path = tmp_path / "img.png"
    save_image(img, path)
    back = load_image(path)
    assert np.array_equal(back.as_array(), arr)


def test_load_image_missing_file(tmp_path):
    with pytest.raises(IOError):
        load_image(tmp_path / "nope.png")


def test_mask_file_convention(tmp_path):
    bits = np.zeros((5, 5), dtype=bool)
    bits[2, 2] = True
    path = tmp_path / "m.png"
    save_mask(_mask(bits), path)
    from PIL import Image
    raw = np.asarray(Image.open(path))
    assert raw.dtype == np.uint8 and raw[2, 2] == 255 and raw[0, 0] == 0
    assert np.array_equal(load_mask(path).bits, bits)


def test_comparison_overlay_codes():
    pred = np.array([[True, False], [True, False]])
    truth = np.array([[True, True], [False, False]])
    out = comparison_overlay(pred, truth)
    assert tuple(out[0, 0]) == (40, 200, 40)     # hit
    assert tuple(out[0, 1]) == (255, 255, 255)   # miss
    assert tuple(out[1, 0]) == (220, 40, 40)     # false alarm
    assert tuple(out[1, 1]) == (128, 128, 128)   # correct genuine


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [("img_0", "prnu", 1.0, 0.5, 2.0 / 3.0)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "image_id,detector,precision,recall,f_measure"
    assert lines[1] == "img_0,prnu,1.000000,0.500000,0.666667"


def test_manifest_roundtrip(tmp_path):
    rows = [
        {"image": "images/a.png", "mask": "masks/a.png", "camera": "cam0",
         "kind": "splice"},
        {"image": "images/b.png", "mask": "", "camera": "", "kind": ""},
    ]
    path = tmp_path / "manifest.csv"
    write_manifest(path, rows)
    back = read_manifest(path)
    assert len(back) == 2
    assert back[0]["image"].endswith("images/a.png")
    assert back[0]["mask"].endswith("masks/a.png")
    assert back[0]["camera"] == "cam0"
    assert not back[1]["mask"]


def test_manifest_requires_image_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("mask,kind\nx.png,splice\n")
    with pytest.raises(ValueError):
        read_manifest(path)
