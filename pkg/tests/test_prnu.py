"""Sensor-noise pipeline tests: denoising, residuals, correlation scores,
fingerprint estimation, clustering, association, and localization.

Statistical assertions run on fixed seeds, so they are deterministic; the
margins were chosen with room to spare over the observed values.
"""

import functools
import os

import numpy as np
import pytest
from scipy import ndimage

from forgeloc.imgcore import Plane, RgbImage, luminance
from forgeloc.prnu import (
    ClusterSet,
    CorrelationField,
    Fingerprint,
    NoiseResidual,
    associate_image,
    cluster_residuals,
    correlation_field,
    denoise,
    estimate_fingerprint,
    load_fingerprint,
    noise_residual,
    normalized_corr,
    pce,
    prnu_mask,
    read_cluster_manifest,
    save_fingerprint,
    write_cluster_manifest,
)
from forgeloc.synth import make_camera, make_scene, shoot

from _oracles import window_pearson_direct

# Module tests run at 128x128 or below to stay fast.  At that size the
# default sensor pattern strength leaves single-image PCE marginal, so the
# fixtures use sigma_k = 0.05; the code path is identical.
STRONG_K = 0.05


def _shot(camera, scene_seed, shot_seed, shape=(128, 128)):
    return shoot(camera, make_scene(shape, seed=scene_seed), seed=shot_seed)


@functools.lru_cache(maxsize=1)
def _bank():
    """Two strong cameras, six 128x128 shots each, with residuals.

    Image indices 0..5 belong to camera A, 6..11 to camera B.
    """
    cam_a = make_camera((128, 128), sigma_k=STRONG_K, seed=11, cam_id="ca")
    cam_b = make_camera((128, 128), sigma_k=STRONG_K, seed=12, cam_id="cb")
    images, residuals = [], []
    for ci, cam in enumerate((cam_a, cam_b)):
        for s in range(6):
            img = _shot(cam, 100 * ci + s, 500 + 100 * ci + s)
            images.append(img)
            residuals.append(noise_residual(img))
    return cam_a, cam_b, images, residuals


@functools.lru_cache(maxsize=1)
def _bank_clusters():
    _, _, images, residuals = _bank()
    return cluster_residuals(residuals, images, min_cluster_size=3, seed=0)


# --- denoise ---

def test_denoise_constant_is_identity():
    plane = Plane(np.full((40, 40), 77.0))
    out = denoise(plane)
    np.testing.assert_allclose(out.data, plane.data, atol=1e-9)


def test_denoise_reduces_noise_variance():
    # pure noise around a flat level: nearly all of it should come out
    ratios = []
    for s in range(20):
        rng = np.random.default_rng(s)
        noisy = 128.0 + rng.normal(0.0, 6.0, (64, 64))
        out = denoise(Plane(noisy)).data
        ratios.append(np.mean((out - 128.0) ** 2) / np.mean((noisy - 128.0) ** 2))
    assert max(ratios) < 0.05
    assert np.mean(ratios) < 0.02


def test_denoise_preserves_step_edge_better_than_box():
    clean = np.full((64, 64), 60.0)
    clean[:, 32:] = 190.0
    for s in range(10):
        rng = np.random.default_rng(100 + s)
        noisy = clean + rng.normal(0.0, 4.0, clean.shape)
        nlm = denoise(Plane(noisy)).data
        box = ndimage.uniform_filter(noisy, 3)
        assert np.abs(nlm - clean).mean() < 0.5 * np.abs(box - clean).mean()


def test_denoise_rejects_bad_strength():
    plane = Plane(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        denoise(plane, strength=0.0)
    with pytest.raises(ValueError):
        denoise(plane, strength=-1.0)


# --- noise_residual ---

def test_residual_of_constant_image_is_zero():
    img = RgbImage(*[Plane(np.full((48, 48), 90.0)) for _ in range(3)])
    res = noise_residual(img)
    np.testing.assert_allclose(res.plane.data, 0.0, atol=1e-9)
    assert res.source_dims == (48, 48)


def test_residual_is_zero_mean():
    cam = make_camera((64, 64), seed=4)
    img = _shot(cam, 30, 31, shape=(64, 64))
    res = noise_residual(img)
    assert abs(res.plane.data.mean()) < 1e-10


def test_residual_matches_own_pattern():
    """The residual should correlate better with the camera's own pattern
    than with a foreign one.  Observed: 19/20 seeds at this size."""
    wins = 0
    for s in range(20):
        cam = make_camera((64, 64), seed=s)
        foreign = make_camera((64, 64), seed=1000 + s)
        img = _shot(cam, s + 300, s + 600, shape=(64, 64))
        res = noise_residual(img).plane
        y = luminance(img).data
        good = normalized_corr(res, Plane(cam.k.data * y))
        bad = normalized_corr(res, Plane(foreign.k.data * y))
        wins += good > bad
    assert wins >= 17


def test_same_camera_residuals_correlate():
    # different scenes everywhere, so shared content cannot explain it
    cam_a = make_camera((128, 128), seed=7)
    cam_b = make_camera((128, 128), seed=8)
    for s in range(5):
        r_a1 = noise_residual(_shot(cam_a, 10 + s, 50 + s)).plane
        r_a2 = noise_residual(_shot(cam_a, 20 + s, 60 + s)).plane
        r_b = noise_residual(_shot(cam_b, 30 + s, 70 + s)).plane
        same = normalized_corr(r_a1, r_a2)
        cross = normalized_corr(r_a1, r_b)
        assert same > cross + 0.02


# --- normalized_corr ---

def test_normalized_corr_reference_points():
    rng = np.random.default_rng(1)
    a = Plane(rng.normal(0.0, 1.0, (32, 32)))
    assert normalized_corr(a, a) == pytest.approx(1.0, abs=1e-9)
    assert normalized_corr(a, Plane(-a.data)) == pytest.approx(-1.0, abs=1e-9)
    # invariant under any positive affine map
    assert normalized_corr(a, Plane(2.0 * a.data + 3.0)) == pytest.approx(1.0, abs=1e-9)


def test_normalized_corr_near_zero_for_independent():
    rng = np.random.default_rng(2)
    a = Plane(rng.normal(0.0, 1.0, (64, 64)))
    b = Plane(rng.normal(0.0, 1.0, (64, 64)))
    assert abs(normalized_corr(a, b)) < 0.1


def test_normalized_corr_errors():
    flat = Plane(np.full((16, 16), 3.0))
    noise = Plane(np.random.default_rng(3).normal(0, 1, (16, 16)))
    with pytest.raises(ValueError):
        normalized_corr(flat, noise)
    with pytest.raises(ValueError):
        normalized_corr(noise, flat)
    with pytest.raises(ValueError):
        normalized_corr(noise, Plane(np.zeros((16, 17))))


# --- pce ---

def _as_residual(arr):
    return NoiseResidual(Plane(np.asarray(arr, dtype=np.float64)), arr.shape)


def test_pce_self_match_is_large():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 1.0, (64, 64))
    assert pce(_as_residual(a), Plane(a.copy())) > 1000.0


def test_pce_independent_inputs_stay_small():
    scores = []
    for s in range(50):
        rng = np.random.default_rng(2000 + s)
        a = rng.normal(0.0, 1.0, (64, 64))
        b = rng.normal(0.0, 1.0, (64, 64))
        scores.append(pce(_as_residual(a), Plane(b)))
    scores = np.abs(scores)
    assert scores.max() < 50.0
    assert scores.mean() < 30.0


def test_pce_sign_and_scale():
    rng = np.random.default_rng(4)
    a = rng.normal(0.0, 1.0, (64, 64))
    pos = pce(_as_residual(a), Plane(a.copy()))
    neg = pce(_as_residual(a), Plane(-a))
    assert neg < 0.0
    assert neg == pytest.approx(-pos, rel=1e-9)
    # common rescaling of either input cancels out
    assert pce(_as_residual(a), Plane(5.0 * a)) == pytest.approx(pos, rel=1e-9)
    assert pce(_as_residual(0.3 * a), Plane(a.copy())) == pytest.approx(pos, rel=1e-9)


def test_pce_circular_shift_invariance():
    # correlation is circular, so shifting one input moves the peak
    # without changing its magnitude or the energy term
    rng = np.random.default_rng(5)
    a = rng.normal(0.0, 1.0, (64, 64))
    b = rng.normal(0.0, 1.0, (64, 64)) + 0.4 * a
    base = pce(_as_residual(a), Plane(b))
    rolled = pce(_as_residual(a), Plane(np.roll(b, (3, 7), axis=(0, 1))))
    assert rolled == pytest.approx(base, rel=1e-9)


def test_pce_validation():
    rng = np.random.default_rng(6)
    a = rng.normal(0.0, 1.0, (32, 32))
    with pytest.raises(ValueError):
        pce(_as_residual(a), Plane(np.zeros((32, 33))))
    with pytest.raises(ValueError):
        pce(_as_residual(a), Plane(a), exclusion_radius=-1)
    with pytest.raises(ValueError):
        # exclusion square of side 41 cannot fit a 32-pixel surface
        pce(_as_residual(a), Plane(a), exclusion_radius=20)


# --- estimate_fingerprint ---

def test_fingerprint_from_constant_image():
    rng = np.random.default_rng(7)
    level = 80.0
    img = RgbImage(*[Plane(np.full((24, 24), level)) for _ in range(3)])
    res = _as_residual(rng.normal(0.0, 1.0, (24, 24)))
    fp = estimate_fingerprint([(img, res)], fp_id=3)
    # sum(y r) / sum(y^2) with constant y collapses to r / y
    np.testing.assert_allclose(fp.estimate().data, res.plane.data / level,
                               atol=1e-12)
    assert fp.members == 1
    assert fp.id == 3


def test_fingerprint_zero_luminance_is_harmless():
    img = RgbImage(*[Plane(np.zeros((16, 16))) for _ in range(3)])
    res = _as_residual(np.random.default_rng(8).normal(0, 1, (16, 16)))
    fp = estimate_fingerprint([(img, res)])
    np.testing.assert_array_equal(fp.estimate().data, 0.0)


def test_fingerprint_sharpens_with_more_members():
    cam = make_camera((96, 96), sigma_k=STRONG_K, seed=3)
    pairs = []
    for s in range(25):
        img = _shot(cam, 400 + s, 700 + s, shape=(96, 96))
        pairs.append((img, noise_residual(img)))
    corrs = [normalized_corr(estimate_fingerprint(pairs[:n]).estimate(), cam.k)
             for n in (5, 10, 25)]
    assert corrs[0] < corrs[1] < corrs[2]
    assert corrs[2] - corrs[0] > 0.05
    assert corrs[2] > 0.5


def test_fingerprint_validation():
    with pytest.raises(ValueError):
        estimate_fingerprint([])
    img = RgbImage(*[Plane(np.full((16, 16), 50.0)) for _ in range(3)])
    res = _as_residual(np.zeros((16, 17)))
    with pytest.raises(ValueError):
        estimate_fingerprint([(img, res)])
    with pytest.raises(ValueError):
        Fingerprint(Plane(np.zeros((8, 8))), Plane(np.full((8, 8), -1.0)), 1, None)
    with pytest.raises(ValueError):
        Fingerprint(Plane(np.zeros((8, 8))), Plane(np.ones((8, 8))), 0, None)


# --- cluster_residuals ---

def test_single_residual_clustering():
    cam_a, _, images, residuals = _bank()
    one = cluster_residuals(residuals[:1], images[:1], min_cluster_size=1)
    assert [sorted(m) for m in one.members] == [[0]]
    assert one.leftovers == []
    alone = cluster_residuals(residuals[:1], images[:1], min_cluster_size=2)
    assert alone.clusters == []
    assert alone.leftovers == [0]


def test_two_camera_partition():
    cs = _bank_clusters()
    got = {frozenset(m) for m in cs.members}
    assert got == {frozenset(range(6)), frozenset(range(6, 12))}
    assert cs.leftovers == []
    assert sorted(fp.id for fp in cs.clusters) == [0, 1]


def test_partition_stable_across_seeds():
    _, _, images, residuals = _bank()
    partitions = []
    for seed in (0, 1, 2):
        cs = cluster_residuals(residuals, images, min_cluster_size=3, seed=seed)
        partitions.append({frozenset(m) for m in cs.members})
    assert partitions[0] == partitions[1] == partitions[2]


def test_cluster_validation():
    _, _, images, residuals = _bank()
    with pytest.raises(ValueError):
        cluster_residuals([], [])
    with pytest.raises(ValueError):
        cluster_residuals(residuals[:2], images[:3])
    with pytest.raises(ValueError):
        cluster_residuals(residuals[:2], images[:2], min_cluster_size=0)
    with pytest.raises(ValueError):
        ClusterSet([], [[0]], [])
    with pytest.raises(ValueError):
        ClusterSet([], [], [0, 0])


# --- associate_image ---

def _cluster_of(cs, image_index):
    for fp, members in zip(cs.clusters, cs.members):
        if image_index in members:
            return fp.id
    raise AssertionError("image %d not in any cluster" % image_index)


def test_association_finds_camera():
    cam_a, cam_b, _, _ = _bank()
    cs = _bank_clusters()
    fresh_a = _shot(cam_a, 999, 888)
    fresh_b = _shot(cam_b, 998, 887)
    cid, best = associate_image(fresh_a, noise_residual(fresh_a), cs)
    assert cid == _cluster_of(cs, 0)
    assert best > 100.0
    cid, best = associate_image(fresh_b, noise_residual(fresh_b), cs)
    assert cid == _cluster_of(cs, 6)
    assert best > 100.0


def test_association_rejects_foreign_noise():
    cs = _bank_clusters()
    rng = np.random.default_rng(5)
    noise = RgbImage(*[Plane(rng.uniform(0.0, 255.0, (128, 128)))
                       for _ in range(3)])
    cid, best = associate_image(noise, noise_residual(noise), cs)
    assert cid is None
    assert best < 50.0


def test_association_needs_clusters():
    cam_a, _, images, residuals = _bank()
    empty = ClusterSet([], [], [0, 1])
    with pytest.raises(ValueError):
        associate_image(images[0], residuals[0], empty)


# --- correlation_field ---

def test_field_is_one_on_matching_residual():
    rng = np.random.default_rng(0)
    img = RgbImage(*[Plane(rng.uniform(40.0, 220.0, (64, 64))) for _ in range(3)])
    pattern = rng.normal(0.0, 1.0, (64, 64))
    fp = Fingerprint(Plane(pattern.copy()), Plane(np.ones((64, 64))), 1, 0)
    z = pattern * luminance(img).data
    field = correlation_field(img, NoiseResidual(Plane(z.copy()), (64, 64)),
                              fp, window=17)
    np.testing.assert_allclose(field.plane.data, 1.0, atol=1e-9)
    assert field.pce > 1000.0
    assert field.window == 17


def test_field_matches_direct_window_computation():
    rng = np.random.default_rng(9)
    img = RgbImage(*[Plane(rng.uniform(40.0, 220.0, (64, 64))) for _ in range(3)])
    pattern = rng.normal(0.0, 1.0, (64, 64))
    fp = Fingerprint(Plane(pattern.copy()), Plane(np.ones((64, 64))), 1, 0)
    res = NoiseResidual(Plane(rng.normal(0.0, 1.0, (64, 64))), (64, 64))
    field = correlation_field(img, res, fp, window=17)
    want = window_pearson_direct(res.plane.data,
                                 pattern * luminance(img).data, 17)
    np.testing.assert_allclose(field.plane.data, want, atol=1e-9)


def test_field_low_on_independent_noise():
    rng = np.random.default_rng(10)
    img = RgbImage(*[Plane(rng.uniform(40.0, 220.0, (256, 256))) for _ in range(3)])
    fp = Fingerprint(Plane(rng.normal(0.0, 1.0, (256, 256))),
                     Plane(np.ones((256, 256))), 1, 0)
    res = NoiseResidual(Plane(rng.normal(0.0, 1.0, (256, 256))), (256, 256))
    field = correlation_field(img, res, fp, window=129)
    assert np.abs(field.plane.data).mean() < 0.05


def test_field_window_validation():
    _, _, images, residuals = _bank()
    fp = _bank_clusters().clusters[0]
    with pytest.raises(ValueError):
        correlation_field(images[0], residuals[0], fp, window=16)
    with pytest.raises(ValueError):
        correlation_field(images[0], residuals[0], fp, window=1)
    small = RgbImage(*[Plane(np.full((32, 32), 50.0)) for _ in range(3)])
    with pytest.raises(ValueError):
        correlation_field(small, noise_residual(small), fp)


# --- prnu_mask ---

def test_mask_ignores_saturated_square():
    lum = np.full((200, 200), 128.0)
    lum[60:140, 60:140] = 255.0
    img = RgbImage(Plane(lum.copy()), Plane(lum.copy()), Plane(lum.copy()))
    field = CorrelationField(Plane(np.zeros((200, 200))), 17, 500.0)
    mask = prnu_mask(field, img)
    # zero correlation flags everything except the saturated block
    assert not mask.bits[100, 100]
    assert mask.bits[10, 10]
    assert mask.bits[10, 150]
    assert int(mask.bits.sum()) <= 200 * 200 - 78 * 78


def test_mask_threshold_adapts_to_pce():
    img = RgbImage(*[Plane(np.full((200, 200), 128.0)) for _ in range(3)])
    half = np.full((200, 200), 0.5)
    weak = prnu_mask(CorrelationField(Plane(half.copy()), 17, 250.0), img)
    strong = prnu_mask(CorrelationField(Plane(half.copy()), 17, 2000.0), img)
    unhinged = prnu_mask(CorrelationField(Plane(half.copy()), 17, -3.0), img)
    # weak match: threshold doubles, 0.5 < 0.9 flags (nearly) everything;
    # strong match: threshold halves, 0.5 > 0.225 flags nothing
    assert weak.bits.mean() > 0.95
    assert strong.is_empty()
    assert unhinged.bits.mean() > 0.95


def test_mask_dim_mismatch():
    img = RgbImage(*[Plane(np.full((64, 64), 128.0)) for _ in range(3)])
    field = CorrelationField(Plane(np.zeros((64, 65))), 17, 100.0)
    with pytest.raises(ValueError):
        prnu_mask(field, img)


# --- file formats ---

def test_fingerprint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    fp = Fingerprint(Plane(rng.normal(0.0, 3.0, (32, 48))),
                     Plane(rng.uniform(0.0, 2e5, (32, 48))), 6, None)
    path = tmp_path / "fp_07.bin"
    save_fingerprint(fp, path)
    back = load_fingerprint(path)
    assert back.members == 6
    assert back.id == 7          # parsed from the trailing digits
    assert load_fingerprint(path, fp_id=42).id == 42
    np.testing.assert_allclose(back.numerator.data, fp.numerator.data,
                               rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(back.denominator.data, fp.denominator.data,
                               rtol=1e-6)
    # a second save of the loaded copy must be byte-identical: the values
    # already sit on the float32 grid
    other = tmp_path / "again.bin"
    save_fingerprint(back, other)
    assert other.read_bytes() == path.read_bytes()


def test_fingerprint_file_errors(tmp_path):
    fp = Fingerprint(Plane(np.zeros((8, 8))), Plane(np.ones((8, 8))), 2, 0)
    path = tmp_path / "fp.bin"
    save_fingerprint(fp, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError):
        load_fingerprint(bad)
    short = tmp_path / "short.bin"
    short.write_bytes(blob[:14])
    with pytest.raises(ValueError):
        load_fingerprint(short)
    clipped = tmp_path / "clipped.bin"
    clipped.write_bytes(blob[:-4])
    with pytest.raises(ValueError):
        load_fingerprint(clipped)


def test_cluster_manifest_roundtrip(tmp_path):
    rows = [("shot_000.png", 0, 312.5), ("shot_001.png", None, 17.0441),
            ("noise.png", 2, -3.25)]
    path = tmp_path / "clusters.csv"
    write_cluster_manifest(path, rows)
    text = path.read_text()
    assert ",-," in text         # unassociated images use a dash
    back = read_cluster_manifest(path)
    assert [r[0] for r in back] == [r[0] for r in rows]
    assert [r[1] for r in back] == [r[1] for r in rows]
    for got, want in zip(back, rows):
        assert got[2] == pytest.approx(want[2], abs=1e-4)
