"""Shared raster types, mask morphology and evaluation metrics.

Everything downstream (the three detectors, the fusion stage and the
synthetic generator) works in terms of the types defined here: a
single-channel ``Plane``, an 8-bit ``RgbImage`` and a boolean
``TamperMask`` tagged with the detector that produced it.
"""
from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "MaskSource",
    "Plane",
    "RgbImage",
    "TamperMask",
    "LUMA_WEIGHTS",
    "luminance",
    "disc_element",
    "morph_clean",
    "mask_scores",
    "f_measure",
    "windowed_pearson",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "mask_roundtrip",
    "comparison_overlay",
    "write_metrics_csv",
    "read_manifest",
    "write_manifest",
]

# Rec. 601 luma weights, used for every gray conversion in the package.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class MaskSource(Enum):
    """Provenance of a tamper mask."""

    PRNU = "prnu"
    COPYMOVE = "copymove"
    SPLICING = "splicing"
    FUSED = "fused"
    TRUTH = "truth"


@dataclass(frozen=True)
class Plane:
    """Single-channel raster: 2-D float64 array, row-major, finite values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("plane data must be a non-empty 2-D array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("plane data must contain only finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class RgbImage:
    """Three planes of identical dimensions holding 8-bit sample values."""

    r: Plane
    g: Plane
    b: Plane

    def __post_init__(self):
        if not (self.r.shape == self.g.shape == self.b.shape):
            raise ValueError("channel dimensions differ")
        for ch in (self.r, self.g, self.b):
            if ch.data.min() < 0.0 or ch.data.max() > 255.0:
                raise ValueError("channel values outside [0, 255]")

    @property
    def height(self) -> int:
        return self.r.height

    @property
    def width(self) -> int:
        return self.r.width

    @property
    def shape(self) -> tuple[int, int]:
        return self.r.shape

    @classmethod
    def from_array(cls, arr) -> "RgbImage":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) array")
        return cls(Plane(arr[:, :, 0]), Plane(arr[:, :, 1]), Plane(arr[:, :, 2]))

    def as_array(self) -> np.ndarray:
        return np.stack([self.r.data, self.g.data, self.b.data], axis=-1)

    def luminance(self) -> Plane:
        return luminance(self)


def luminance(image: RgbImage) -> Plane:
    """Weighted gray conversion (0.299 R + 0.587 G + 0.114 B)."""
    wr, wg, wb = LUMA_WEIGHTS
    return Plane(wr * image.r.data + wg * image.g.data + wb * image.b.data)


@dataclass(frozen=True)
class TamperMask:
    """Boolean tamper map (True = tampered) plus its provenance."""

    bits: np.ndarray
    source: MaskSource

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("mask bits must be a non-empty 2-D array")
        if not isinstance(self.source, MaskSource):
            raise ValueError("mask source must be a MaskSource member")
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def is_empty(self) -> bool:
        return not bool(self.bits.any())


# --- morphology ---

def disc_element(radius: int) -> np.ndarray:
    """Disc structuring element {(dx, dy): dx^2 + dy^2 <= radius^2}."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    yy, xx = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _remove_small(bits: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1 or not bits.any():
        return bits
    labels, count = ndimage.label(bits, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return bits
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def morph_clean(mask, radius: int = 2, min_area: int = 64):
    """Closing, opening (disc element) and small-component removal.

    The three steps are repeated until the mask stops changing, which makes
    the operation idempotent even when component removal re-exposes gaps
    that the next closing would bridge.  Convergence takes one or two
    passes on anything non-pathological; the loop is capped regardless.
    Accepts a TamperMask or a plain boolean array and returns the same
    kind it was given.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    se = disc_element(radius)
    wrapped = isinstance(mask, TamperMask)
    bits = mask.bits if wrapped else np.asarray(mask, dtype=bool)
    for _ in range(8):
        prev = bits
        if radius > 0:
            bits = ndimage.binary_closing(bits, structure=se, border_value=0)
            bits = ndimage.binary_opening(bits, structure=se, border_value=0)
        bits = _remove_small(bits, min_area)
        if np.array_equal(bits, prev):
            break
    return TamperMask(bits, mask.source) if wrapped else bits


# --- metrics ---

def _as_bits(mask) -> np.ndarray:
    if isinstance(mask, TamperMask):
        return mask.bits
    arr = np.asarray(mask)
    if arr.dtype != np.bool_:
        arr = arr.astype(bool)
    return arr


def mask_scores(predicted, truth) -> tuple[float, float, float]:
    """Pixel precision, recall and F-measure of a predicted mask.

    Conventions for degenerate cases: an empty prediction against an empty
    truth scores 1.0 everywhere; a non-empty prediction against an empty
    truth (pure false alarm) scores F = 0; F = 0 whenever there is no true
    positive at all.
    """
    p = _as_bits(predicted)
    t = _as_bits(truth)
    if p.shape != t.shape:
        raise ValueError("mask dimensions differ: %s vs %s" % (p.shape, t.shape))
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    if tp == 0:
        f = 1.0 if fp == 0 and fn == 0 else 0.0
    else:
        f = 2.0 * precision * recall / (precision + recall)
    return precision, recall, f


def f_measure(predicted, truth) -> float:
    """Harmonic mean of pixel precision and recall, see mask_scores."""
    return mask_scores(predicted, truth)[2]


# --- sliding-window statistics ---

def _clipped_box_sums(arr: np.ndarray, window: int) -> np.ndarray:
    """Sliding-window sums with the window clipped at the borders."""
    h, w = arr.shape
    lo = (window - 1) // 2
    hi = window // 2
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(arr, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    y0 = np.clip(np.arange(h) - lo, 0, h)
    y1 = np.clip(np.arange(h) + hi + 1, 0, h)
    x0 = np.clip(np.arange(w) - lo, 0, w)
    x1 = np.clip(np.arange(w) + hi + 1, 0, w)
    return (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)]
            - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])


def _clipped_box_counts(shape: tuple[int, int], window: int) -> np.ndarray:
    h, w = shape
    lo = (window - 1) // 2
    hi = window // 2
    ny = np.clip(np.arange(h) + hi + 1, 0, h) - np.clip(np.arange(h) - lo, 0, h)
    nx = np.clip(np.arange(w) + hi + 1, 0, w) - np.clip(np.arange(w) - lo, 0, w)
    return np.outer(ny, nx).astype(np.float64)


def windowed_pearson(a, b, window: int) -> np.ndarray:
    """Per-pixel Pearson correlation of two rasters over a sliding window.

    Windows are clipped at the borders.  Windows where either input has
    (numerically) zero variance yield 0.  Cost is O(pixels) regardless of
    the window size thanks to integral-image sliding sums.
    """
    a = a.data if isinstance(a, Plane) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Plane) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("input dimensions differ")
    if window < 2:
        raise ValueError("window must be >= 2")
    n = _clipped_box_counts(a.shape, window)
    sa = _clipped_box_sums(a, window)
    sb = _clipped_box_sums(b, window)
    saa = _clipped_box_sums(a * a, window)
    sbb = _clipped_box_sums(b * b, window)
    sab = _clipped_box_sums(a * b, window)
    cov = sab - sa * sb / n
    va = saa - sa * sa / n
    vb = sbb - sb * sb / n
    # zero-variance guard: anything at cancellation-noise level counts as flat
    tol_a = 1e-10 * np.maximum(saa, 1e-30)
    tol_b = 1e-10 * np.maximum(sbb, 1e-30)
    ok = (va > tol_a) & (vb > tol_b)
    rho = np.zeros_like(cov)
    np.divide(cov, np.sqrt(va * vb, where=ok, out=np.ones_like(va)),
              where=ok, out=rho)
    return np.clip(rho, -1.0, 1.0)


# --- geometric warps ---

def _rot_matrix(rotation_deg: float) -> np.ndarray:
    phi = np.deg2rad(rotation_deg)
    c, s = np.cos(phi), np.sin(phi)
    # acts on (y, x) column vectors
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def warp_rotate_scale(arr: np.ndarray, rotation: float, scale: float):
    """Forward-warp a 2-D array: rotate by `rotation` degrees about the
    center, magnify by `scale`, output sized to the transformed bounding
    box.

    Returns (warped, linear, offset) where output coords u = linear @ p +
    offset for input coords p, both as (y, x) vectors.  Multiples of 90
    degrees at scale 1 go through np.rot90 and are exact; everything else
    is resampled bilinearly.  The same convention is used when forging a
    transformed copy and when matching against a transformed image, so the
    two sides agree by construction.
    """
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    rot = rotation % 360.0
    if scale == 1.0 and rot in (0.0, 90.0, 180.0, 270.0):
        k = int(rot) // 90
        warped = np.rot90(arr, k).copy()
        lin = _rot_matrix(rot)
        c_in = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        hb, wb = warped.shape
        c_out = np.array([(hb - 1) / 2.0, (wb - 1) / 2.0])
        return warped, lin, c_out - lin @ c_in
    lin = scale * _rot_matrix(rot)
    c_in = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    corners = np.array([[0.0, 0.0], [0.0, w - 1.0], [h - 1.0, 0.0], [h - 1.0, w - 1.0]])
    mapped = (lin @ (corners - c_in).T).T
    span = mapped.max(axis=0) - mapped.min(axis=0)
    hb = int(np.ceil(span[0])) + 1
    wb = int(np.ceil(span[1])) + 1
    c_out = np.array([(hb - 1) / 2.0, (wb - 1) / 2.0])
    inv = np.linalg.inv(lin)
    warped = ndimage.affine_transform(
        arr, inv, offset=c_in - inv @ c_out, output_shape=(hb, wb),
        order=1, mode="constant", cval=0.0)
    return warped, lin, c_out - lin @ c_in


def warp_support(shape: tuple[int, int], rotation: float, scale: float) -> np.ndarray:
    """Boolean support of warp_rotate_scale output (True where the warp
    carries actual input content)."""
    warped, _, _ = warp_rotate_scale(np.ones(shape), rotation, scale)
    return warped >= 0.5


# --- file I/O ---

def load_image(path) -> RgbImage:
    """Read a PNG / PGM / PPM image as an RgbImage (gray is replicated)."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise IOError("cannot read image %s: %s" % (path, exc)) from exc
    return RgbImage.from_array(arr)


def save_image(image: RgbImage, path) -> None:
    arr = np.rint(image.as_array()).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: TamperMask, path) -> None:
    """Write a mask as a single-channel PNG, 0 = genuine, 255 = tampered."""
    arr = np.where(mask.bits, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path, source: MaskSource = MaskSource.TRUTH) -> TamperMask:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise IOError("cannot read mask %s: %s" % (path, exc)) from exc
    return TamperMask(arr >= 128, source)


def mask_roundtrip(mask: TamperMask, path=None) -> TamperMask:
    """Serialize a mask to the PNG mask format and read it back."""
    if path is None:
        fd, tmp = tempfile.mkstemp(suffix=".png")
        os.close(fd)
        try:
            save_mask(mask, tmp)
            return load_mask(tmp, mask.source)
        finally:
            os.unlink(tmp)
    save_mask(mask, path)
    return load_mask(path, mask.source)


def comparison_overlay(predicted, truth) -> np.ndarray:
    """Color-coded comparison image: gray = correct genuine, green = hit,
    red = false alarm, white = miss."""
    p = _as_bits(predicted)
    t = _as_bits(truth)
    if p.shape != t.shape:
        raise ValueError("mask dimensions differ")
    out = np.empty(p.shape + (3,), dtype=np.uint8)
    out[...] = (128, 128, 128)
    out[p & ~t] = (220, 40, 40)
    out[~p & t] = (255, 255, 255)
    out[p & t] = (40, 200, 40)
    return out


METRICS_COLUMNS = ("image_id", "detector", "precision", "recall", "f_measure")


def write_metrics_csv(path, rows) -> None:
    """Write evaluation rows (image_id, detector, precision, recall, F)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for image_id, detector, precision, recall, f in rows:
            writer.writerow([image_id, detector,
                             "%.6f" % precision, "%.6f" % recall, "%.6f" % f])


def read_manifest(path) -> list[dict]:
    """Read a corpus manifest CSV.  Columns 'image' and optionally 'mask'
    carry paths relative to the manifest location; extra columns pass
    through untouched."""
    base = Path(path).parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image" not in reader.fieldnames:
            raise ValueError("manifest %s lacks an 'image' column" % path)
        for row in reader:
            row = dict(row)
            row["image"] = str(base / row["image"])
            if row.get("mask"):
                row["mask"] = str(base / row["mask"])
            rows.append(row)
    return rows


def write_manifest(path, rows, columns=("image", "mask", "camera", "kind")) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(col, "") for col in columns])
