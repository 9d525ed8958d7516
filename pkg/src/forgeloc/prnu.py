"""Sensor-noise analysis: residual extraction, fingerprint estimation,
camera clustering and correlation-field localization.

The imaging model behind everything here is y = (1 + k) x + theta with a
fixed multiplicative pattern k per camera.  A noise residual r = y - d(y)
then carries y k plus whatever the denoiser d failed to remove, so
residuals of images from the same camera correlate, and a window of an
image whose content was pasted over no longer correlates with k times y.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import (
    MaskSource,
    Plane,
    RgbImage,
    TamperMask,
    LUMA_WEIGHTS,
    luminance,
    morph_clean,
    windowed_pearson,
)

__all__ = [
    "NoiseResidual",
    "Fingerprint",
    "ClusterSet",
    "CorrelationField",
    "denoise",
    "noise_residual",
    "normalized_corr",
    "pce",
    "cluster_residuals",
    "estimate_fingerprint",
    "associate_image",
    "correlation_field",
    "prnu_mask",
    "save_fingerprint",
    "load_fingerprint",
    "write_cluster_manifest",
    "read_cluster_manifest",
]

# nonlocal-means geometry, fixed for the whole package
NLM_PATCH = 7
NLM_SEARCH = 21

FINGERPRINT_MAGIC = b"PRNUFP1\x00"


@dataclass(frozen=True)
class NoiseResidual:
    """Luminance-combined noise residual of one image."""

    plane: Plane
    source_dims: tuple[int, int]

    def __post_init__(self):
        if tuple(self.source_dims) != self.plane.shape:
            raise ValueError("residual dimensions disagree with source_dims")


@dataclass(frozen=True)
class Fingerprint:
    """Accumulated fingerprint estimate: numerator sum(y_j r_j) and
    denominator sum(y_j^2) over the member images, kept separate so
    estimates can be merged without re-reading members."""

    numerator: Plane
    denominator: Plane
    members: int
    id: int | None = None

    def __post_init__(self):
        if self.numerator.shape != self.denominator.shape:
            raise ValueError("numerator and denominator dimensions differ")
        if self.members < 1:
            raise ValueError("a fingerprint needs at least one member")
        if self.denominator.data.min() < 0.0:
            raise ValueError("denominator must be non-negative")

    def estimate(self) -> Plane:
        """Pointwise estimate, zero where the denominator is zero."""
        den = self.denominator.data
        out = np.zeros_like(den)
        np.divide(self.numerator.data, den, out=out, where=den > 0.0)
        return Plane(out)


@dataclass(frozen=True)
class ClusterSet:
    """Clustering outcome: one fingerprint per retained cluster, the member
    image ids per cluster (parallel lists) and the leftover image ids."""

    clusters: list
    members: list
    leftovers: list

    def __post_init__(self):
        if len(self.clusters) != len(self.members):
            raise ValueError("clusters and member lists must be parallel")
        seen = [j for ids in self.members for j in ids] + list(self.leftovers)
        if len(seen) != len(set(seen)):
            raise ValueError("an image id appears in more than one place")


@dataclass(frozen=True)
class CorrelationField:
    """Per-pixel windowed correlation between a residual and k * y."""

    plane: Plane
    window: int
    pce: float

    def __post_init__(self):
        d = self.plane.data
        if d.min() < -1.0 - 1e-9 or d.max() > 1.0 + 1e-9:
            raise ValueError("correlation values must lie in [-1, 1]")


# --- denoising and residuals ---

def denoise(plane: Plane, strength: float = 1.0) -> Plane:
    """Nonlocal-means denoising with 7x7 patches in a 21x21 search window.

    Patch weights are exp(-max(d2 - 2 sigma^2, 0) / h^2) with d2 the mean
    squared patch difference, h = strength * sigma, and sigma estimated
    from the median absolute horizontal first difference.  Each offset and
    its opposite share one distance map, so only half the search window is
    scanned explicitly.

    :param plane: single-channel input
    :param strength: filtering strength multiplier, > 0
    """
    if strength <= 0.0:
        raise ValueError("strength must be positive")
    x = plane.data
    d = np.diff(x, axis=1)
    sigma = 1.4826 * np.median(np.abs(d)) / np.sqrt(2.0) if d.size else 0.0
    h2 = max((strength * sigma) ** 2, 1e-12)
    two_sig2 = 2.0 * sigma * sigma

    pr = NLM_PATCH // 2
    sr = NLM_SEARCH // 2
    pad = sr + pr
    padded = np.pad(x, pad, mode="symmetric")
    h, w = x.shape
    center = padded[pad:pad + h, pad:pad + w]
    ext = padded[pad - pr:pad + h + pr, pad - pr:pad + w + pr]

    acc = x.copy()               # the center offset has weight exactly 1
    wsum = np.ones_like(x)
    diff = np.empty_like(ext)
    for dy in range(0, sr + 1):
        for dx in range(-sr, sr + 1):
            if dy == 0 and dx <= 0:
                continue
            np.subtract(ext, padded[pad - pr + dy:pad + h + pr + dy,
                                    pad - pr + dx:pad + w + pr + dx], out=diff)
            np.square(diff, out=diff)
            dist = ndimage.uniform_filter(diff, NLM_PATCH)[pr:h + pr, pr:w + pr]
            np.subtract(dist, two_sig2, out=dist)
            np.maximum(dist, 0.0, out=dist)
            dist /= -h2
            weight = np.exp(dist)
            acc += weight * padded[pad + dy:pad + h + dy, pad + dx:pad + w + dx]
            wsum += weight
            # mirrored offset: the same distances seen from the other end
            sy1 = h - dy
            sx0, sx1 = max(-dx, 0), w - max(dx, 0)
            wm = weight[0:sy1, sx0:sx1]
            acc[dy:h, sx0 + dx:sx1 + dx] += wm * center[0:sy1, sx0:sx1]
            wsum[dy:h, sx0 + dx:sx1 + dx] += wm
    return Plane(acc / wsum)


def noise_residual(image: RgbImage) -> NoiseResidual:
    """Per-channel denoising residual, combined with luma weights and made
    zero-mean."""
    wr, wg, wb = LUMA_WEIGHTS
    parts = []
    for chan in (image.r, image.g, image.b):
        parts.append(chan.data - denoise(chan).data)
    combined = wr * parts[0] + wg * parts[1] + wb * parts[2]
    combined -= combined.mean()
    return NoiseResidual(Plane(combined), image.shape)


# --- correlation scores ---

def normalized_corr(a: Plane, b: Plane) -> float:
    """Pearson correlation of two planes of identical dimensions."""
    x = a.data.ravel()
    y = b.data.ravel()
    if x.shape != y.shape:
        raise ValueError("plane dimensions differ")
    x = x - x.mean()
    y = y - y.mean()
    vx = float(x @ x)
    vy = float(y @ y)
    if vx <= 0.0 or vy <= 0.0:
        raise ValueError("normalized_corr undefined for a zero-variance plane")
    return float((x @ y) / np.sqrt(vx * vy))


def _pce_arrays(a: np.ndarray, b: np.ndarray, exclusion_radius: int) -> float:
    if a.shape != b.shape:
        raise ValueError("input dimensions differ")
    if exclusion_radius < 0:
        raise ValueError("exclusion_radius must be >= 0")
    h, w = a.shape
    if 2 * exclusion_radius + 1 > min(h, w):
        raise ValueError("exclusion square larger than the correlation surface")
    a0 = a - a.mean()
    b0 = b - b.mean()
    cc = np.fft.irfft2(np.fft.rfft2(a0) * np.conj(np.fft.rfft2(b0)), s=(h, w))
    flat = int(np.argmax(np.abs(cc)))
    py, px = divmod(flat, w)
    peak = float(cc[py, px])

    iy = np.arange(h)
    ix = np.arange(w)
    dist_y = np.minimum(np.abs(iy - py), h - np.abs(iy - py))
    dist_x = np.minimum(np.abs(ix - px), w - np.abs(ix - px))
    excl = (dist_y[:, None] <= exclusion_radius) & (dist_x[None, :] <= exclusion_radius)
    n_excl = int(np.count_nonzero(excl))

    energy = float(np.sum(cc * cc) - np.sum(cc[excl] ** 2))
    n_lags = h * w
    if energy <= 0.0:
        if peak == 0.0:
            return 0.0
        return float(np.sign(peak) * np.inf)
    return float(np.sign(peak) * peak * peak * (n_lags - n_excl) / energy)


def pce(residual: NoiseResidual, fingerprint_times_image: Plane,
        exclusion_radius: int = 5) -> float:
    """Signed peak-to-correlation-energy between a residual and k * y.

    The full circular cross-correlation surface is computed via FFT, the
    peak is the largest magnitude on it, and a (2 r + 1)^2 square around
    the peak is excluded from the energy term.  The sign of the peak is
    kept, so anti-correlated inputs come out negative.
    """
    return _pce_arrays(residual.plane.data, fingerprint_times_image.data,
                       exclusion_radius)


# --- fingerprints and clustering ---

def estimate_fingerprint(members, fp_id: int | None = None) -> Fingerprint:
    """Weighted fingerprint estimate over (image, residual) member pairs:
    numerator sum(y_j r_j), denominator sum(y_j^2), with y the luminance.
    All member pixels contribute; no attempt is made to excise tampered
    areas from members."""
    members = list(members)
    if not members:
        raise ValueError("at least one member required")
    shape = members[0][0].shape
    num = np.zeros(shape, dtype=np.float64)
    den = np.zeros(shape, dtype=np.float64)
    for image, residual in members:
        if image.shape != shape or residual.plane.shape != shape:
            raise ValueError("member dimensions differ")
        lum = luminance(image).data
        num += lum * residual.plane.data
        den += lum * lum
    return Fingerprint(Plane(num), Plane(den), len(members), fp_id)


def _normalized_vectors(residuals, images) -> list:
    vecs = []
    for res, img in zip(residuals, images):
        if res.plane.shape != img.shape:
            raise ValueError("residual and image dimensions differ")
        lum = luminance(img).data
        vecs.append(res.plane.data / np.maximum(lum, 1.0))
    return vecs


def cluster_residuals(residuals, images, pce_threshold: float = 50.0,
                      min_cluster_size: int = 5, seed: int = 0,
                      exclusion_radius: int = 5) -> ClusterSet:
    """Greedy randomized pairwise-nearest-neighbor clustering of residuals.

    Works on normalized residuals r / max(y, 1).  A random unassigned
    vector seeds a cluster; the remaining vectors are scanned in random
    order and any whose PCE against the current center clears the
    threshold is merged by weighted averaging; the scan repeats until a
    full pass adds nothing, then the next cluster starts.  Clusters
    smaller than min_cluster_size are dissolved into the leftovers.
    Fingerprints for the survivors are rebuilt with the weighted
    estimator, not taken from the running centers.
    """
    residuals = list(residuals)
    images = list(images)
    if len(residuals) != len(images) or not residuals:
        raise ValueError("need matching non-empty residual and image lists")
    if min_cluster_size < 1:
        raise ValueError("min_cluster_size must be >= 1")
    vecs = _normalized_vectors(residuals, images)
    rng = np.random.default_rng(seed)

    unassigned = list(range(len(vecs)))
    raw: list[list[int]] = []
    while unassigned:
        pick = int(rng.integers(len(unassigned)))
        first = unassigned.pop(pick)
        members = [first]
        center = vecs[first].copy()
        weight = 1.0
        changed = True
        while changed and unassigned:
            changed = False
            order = rng.permutation(len(unassigned))
            absorbed = set()
            for oi in order:
                j = unassigned[oi]
                score = _pce_arrays(center, vecs[j], exclusion_radius)
                if score > pce_threshold:
                    center = (weight * center + vecs[j]) / (weight + 1.0)
                    weight += 1.0
                    members.append(j)
                    absorbed.add(j)
                    changed = True
            if absorbed:
                unassigned = [j for j in unassigned if j not in absorbed]
        raw.append(members)

    kept = [m for m in raw if len(m) >= min_cluster_size]
    leftovers = sorted(j for m in raw if len(m) < min_cluster_size for j in m)
    fps = []
    members_out = []
    for ci, ids in enumerate(kept):
        fps.append(estimate_fingerprint(
            [(images[j], residuals[j]) for j in ids], fp_id=ci))
        members_out.append(sorted(ids))
    return ClusterSet(fps, members_out, leftovers)


def associate_image(image: RgbImage, residual: NoiseResidual, clusters: ClusterSet,
                    pce_threshold: float = 100.0,
                    exclusion_radius: int = 5) -> tuple[int | None, float]:
    """Best-matching cluster id (or None below threshold) plus the best PCE."""
    if not clusters.clusters:
        raise ValueError("cluster set has no retained clusters")
    lum = luminance(image).data
    best_id = None
    best_pce = -np.inf
    for fp in clusters.clusters:
        z = fp.estimate().data * lum
        score = _pce_arrays(residual.plane.data, z, exclusion_radius)
        if score > best_pce:
            best_pce = score
            best_id = fp.id
    if best_pce > pce_threshold:
        return best_id, float(best_pce)
    return None, float(best_pce)


# --- localization ---

def correlation_field(image: RgbImage, residual: NoiseResidual,
                      fingerprint: Fingerprint, window: int = 129,
                      exclusion_radius: int = 5) -> CorrelationField:
    """Sliding-window correlation between the residual and k * y.

    :param window: odd window edge, clipped at the borders
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    lum = luminance(image).data
    z = fingerprint.estimate().data * lum
    if z.shape != residual.plane.shape:
        raise ValueError("fingerprint and residual dimensions differ")
    rho = windowed_pearson(residual.plane.data, z, window)
    score = _pce_arrays(residual.plane.data, z, exclusion_radius)
    return CorrelationField(Plane(rho), window, score)


def prnu_mask(field: CorrelationField, image: RgbImage,
              base_threshold: float = 0.45, saturation_level: float = 250.0,
              pce_ref: float = 500.0, morph_radius: int = 4,
              min_area: int = 1500) -> TamperMask:
    """Threshold a correlation field into a tamper mask.

    The decision threshold adapts to the field reliability: t =
    base_threshold * clamp(pce_ref / pce, 0.5, 2.0), so a strongly matched
    image is thresholded conservatively and a weak match aggressively.
    Pixels whose full 3x3 neighborhood is saturated are forced genuine
    since saturated sensors carry no usable pattern.
    """
    if field.plane.shape != image.shape:
        raise ValueError("field and image dimensions differ")
    if field.pce <= 0.0:
        ratio = 2.0
    else:
        ratio = min(max(pce_ref / field.pce, 0.5), 2.0)
    threshold = base_threshold * ratio
    bits = field.plane.data < threshold
    lum = luminance(image).data
    saturated = ndimage.minimum_filter(lum, size=3, mode="nearest") >= saturation_level
    bits &= ~saturated
    return morph_clean(TamperMask(bits, MaskSource.PRNU), morph_radius, min_area)


# --- file formats ---

def save_fingerprint(fp: Fingerprint, path) -> None:
    """Fingerprint binary v1: magic, u32 width/height/members, numerator
    then denominator as float32 little-endian row-major."""
    h, w = fp.numerator.shape
    with open(path, "wb") as fh:
        fh.write(FINGERPRINT_MAGIC)
        fh.write(struct.pack("<III", w, h, fp.members))
        fh.write(fp.numerator.data.astype("<f4").tobytes())
        fh.write(fp.denominator.data.astype("<f4").tobytes())


def load_fingerprint(path, fp_id: int | None = None) -> Fingerprint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FINGERPRINT_MAGIC:
        raise ValueError("%s is not a fingerprint file (bad magic)" % path)
    if len(blob) < 20:
        raise ValueError("%s is truncated" % path)
    w, h, members = struct.unpack("<III", blob[8:20])
    need = 20 + 2 * 4 * w * h
    if len(blob) != need:
        raise ValueError("%s has %d bytes, expected %d" % (path, len(blob), need))
    num = np.frombuffer(blob, dtype="<f4", count=w * h, offset=20)
    den = np.frombuffer(blob, dtype="<f4", count=w * h, offset=20 + 4 * w * h)
    if fp_id is None:
        m = re.search(r"(\d+)$", Path(path).stem)
        fp_id = int(m.group(1)) if m else None
    return Fingerprint(Plane(num.reshape(h, w).astype(np.float64)),
                       Plane(den.reshape(h, w).astype(np.float64)),
                       members, fp_id)


def write_cluster_manifest(path, rows) -> None:
    """One line per image: image_id, cluster id or '-', best PCE."""
    with open(path, "w") as fh:
        for image_id, cluster_id, best in rows:
            cid = "-" if cluster_id is None else str(cluster_id)
            fh.write("%s,%s,%.4f\n" % (image_id, cid, best))


def read_cluster_manifest(path) -> list:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            image_id, cid, best = line.split(",")
            rows.append((image_id, None if cid == "-" else int(cid), float(best)))
    return rows
