"""Sliding-window splicing localization.

A linear classifier is trained on co-occurrence histograms of a
third-difference residual, computed over 128x128 luminance blocks.  At
test time every block position (16-pixel stride) contributes its signed
distance from the separating hyperplane to each pixel it covers; the
aggregated map is thresholded relative to its maximum.

The descriptor deliberately carries no phase information about where a
forgery sits inside the block; localization comes entirely from the
dense overlap of block positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .imgcore import MaskSource, Plane, RgbImage, TamperMask, morph_clean

__all__ = [
    "BLOCK_SIZE",
    "BLOCK_STRIDE",
    "BlockLabel",
    "FeatureVector",
    "LinearModel",
    "SdhMap",
    "residual_features",
    "block_origins",
    "label_blocks",
    "training_blocks",
    "train_model",
    "sdh_map",
    "splicing_mask",
    "save_model",
    "load_model",
]

BLOCK_SIZE = 128
BLOCK_STRIDE = 16

# quantizer settings for the residual: step 1, truncation to {-2..2}
TRUNCATION = 2
N_LEVELS = 2 * TRUNCATION + 1
FEATURE_DIM = N_LEVELS ** 4

MODEL_MAGIC = b"LDSVM01\x00"


def _sign_merge_table() -> np.ndarray:
    """Map each 4-gram bin to the joint bin it shares with its negation.

    Bins are indexed base-5 over the shifted levels (value + 2), most
    significant digit first, so lexicographic order on the signed tuples
    coincides with index order.  Each (b, -b) pair keeps the smaller
    index; the self-symmetric all-zero gram maps to itself.
    """
    idx = np.arange(FEATURE_DIM)
    d0 = idx // 125 % 5 - TRUNCATION
    d1 = idx // 25 % 5 - TRUNCATION
    d2 = idx // 5 % 5 - TRUNCATION
    d3 = idx % 5 - TRUNCATION
    neg = ((-d0 + TRUNCATION) * 125 + (-d1 + TRUNCATION) * 25
           + (-d2 + TRUNCATION) * 5 + (-d3 + TRUNCATION))
    return np.minimum(idx, neg)


_MERGE = _sign_merge_table()


class BlockLabel(Enum):
    PRISTINE = "pristine"
    FAKE = "fake"
    SKIP = "skip"


@dataclass(frozen=True)
class FeatureVector:
    """Normalized 625-bin co-occurrence histogram of one block.

    ``degenerate`` marks blocks whose residual quantized to zero
    everywhere (constant or low-order polynomial content); their
    histogram is still valid but carries no texture evidence.
    """

    bins: np.ndarray
    block_origin: tuple[int, int] = (0, 0)
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.bins, dtype=np.float64)
        if arr.shape != (FEATURE_DIM,):
            raise ValueError("feature vector must have %d bins" % FEATURE_DIM)
        if arr.min() < 0.0:
            raise ValueError("histogram bins must be non-negative")
        if not self.degenerate and abs(arr.sum() - 1.0) > 1e-9:
            raise ValueError("histogram mass must sum to 1")
        object.__setattr__(self, "bins", arr)


@dataclass(frozen=True)
class LinearModel:
    """Standardizing linear classifier (positive score = forged side)."""

    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    margin_scale: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mean = np.asarray(self.feature_mean, dtype=np.float64)
        scale = np.asarray(self.feature_scale, dtype=np.float64)
        if not (w.shape == mean.shape == scale.shape) or w.ndim != 1:
            raise ValueError("model vectors must share one dimension")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if scale.min() <= 0.0:
            raise ValueError("feature scale must be positive elementwise")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_mean", mean)
        object.__setattr__(self, "feature_scale", scale)

    def distance(self, bins: np.ndarray) -> float:
        """Signed geometric distance of one feature vector from the hyperplane."""
        z = (np.asarray(bins, dtype=np.float64) - self.feature_mean) / self.feature_scale
        return float((z @ self.weights + self.bias) * self.margin_scale)


@dataclass(frozen=True)
class SdhMap:
    """Per-pixel sum of signed block distances plus the block coverage count."""

    plane: Plane
    coverage: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.coverage, dtype=np.int32)
        if cov.shape != self.plane.shape:
            raise ValueError("coverage dimensions differ from the map")
        if cov.min() < 0:
            raise ValueError("coverage counts cannot be negative")
        object.__setattr__(self, "coverage", cov)


def _as_gray(block) -> np.ndarray:
    if isinstance(block, Plane):
        return block.data
    return np.asarray(block, dtype=np.float64)


def residual_features(block, origin: tuple[int, int] = (0, 0)) -> FeatureVector:
    """Descriptor of one 128x128 grayscale block.

    Pipeline: third difference [1, -3, 3, -1] along rows and along
    columns, rounding to integer steps, truncation to {-2..2}, 4-gram
    co-occurrence counts taken along each filter's own direction, the
    two direction histograms summed, opposite-sign bins merged into the
    lexicographically smaller one, and the result normalized to unit
    mass.  The kernel annihilates polynomials up to degree 2, so flat
    and smoothly shaded content lands entirely in the zero gram.
    """
    data = _as_gray(block)
    if data.shape != (BLOCK_SIZE, BLOCK_SIZE):
        raise ValueError("expected a %dx%d block, got %r"
                         % (BLOCK_SIZE, BLOCK_SIZE, data.shape))

    counts = np.zeros(FEATURE_DIM, dtype=np.int64)
    for axis in (1, 0):
        x = data if axis == 1 else data.T
        res = x[:, :-3] - 3.0 * x[:, 1:-2] + 3.0 * x[:, 2:-1] - x[:, 3:]
        q = np.clip(np.rint(res), -TRUNCATION, TRUNCATION).astype(np.int64)
        s = q + TRUNCATION
        grams = ((s[:, :-3] * 5 + s[:, 1:-2]) * 5 + s[:, 2:-1]) * 5 + s[:, 3:]
        counts += np.bincount(grams.ravel(), minlength=FEATURE_DIM)

    merged = np.zeros(FEATURE_DIM, dtype=np.float64)
    np.add.at(merged, _MERGE, counts.astype(np.float64))
    total = merged.sum()
    assert total > 0.0
    zero_gram = ((TRUNCATION * 5 + TRUNCATION) * 5 + TRUNCATION) * 5 + TRUNCATION
    degenerate = counts[zero_gram] == counts.sum()
    return FeatureVector(merged / total, tuple(origin), bool(degenerate))


def block_origins(dim: int, block: int = BLOCK_SIZE,
                  stride: int = BLOCK_STRIDE) -> list[int]:
    """Start coordinates of a strided block cover, flushed to the far edge.

    The final origin is forced to dim - block so no pixel is left
    uncovered when the stride does not divide the range evenly.
    """
    if block > dim:
        raise ValueError("block exceeds the image dimension")
    assert stride >= 1
    starts = list(range(0, dim - block + 1, stride))
    if starts[-1] != dim - block:
        starts.append(dim - block)
    return starts


def label_blocks(truth: TamperMask, block: int = BLOCK_SIZE,
                 stride: int = BLOCK_STRIDE) -> list[tuple[tuple[int, int], BlockLabel]]:
    """Assign a training label to every block position of a truth mask.

    A block is FAKE when its forged fraction lies in [0.20, 0.80]: the
    transition area is where the evidence lives.  Fully clean blocks are
    PRISTINE.  Everything else (interiors of large forgeries, slivers
    below 20%) is SKIP and excluded from training.
    """
    bits = truth.bits
    h, w = bits.shape
    out = []
    for oy in block_origins(h, block, stride):
        for ox in block_origins(w, block, stride):
            frac = float(bits[oy:oy + block, ox:ox + block].mean())
            if frac == 0.0:
                label = BlockLabel.PRISTINE
            elif 0.20 <= frac <= 0.80:
                label = BlockLabel.FAKE
            else:
                label = BlockLabel.SKIP
            out.append(((oy, ox), label))
    return out


def training_blocks(image: RgbImage, truth: TamperMask,
                    stride: int = BLOCK_STRIDE):
    """Feature/label pairs of one image, SKIP positions dropped.

    Degenerate (zero-residual) blocks are dropped as well; they carry no
    usable texture statistics and would only dilute the classes.
    """
    lum = image.luminance().data
    feats = []
    labels = []
    for (oy, ox), label in label_blocks(truth, BLOCK_SIZE, stride):
        if label is BlockLabel.SKIP:
            continue
        fv = residual_features(lum[oy:oy + BLOCK_SIZE, ox:ox + BLOCK_SIZE],
                               origin=(oy, ox))
        if fv.degenerate:
            continue
        feats.append(fv)
        labels.append(label)
    return feats, labels


def _label_sign(label) -> float:
    if isinstance(label, BlockLabel):
        if label is BlockLabel.SKIP:
            raise ValueError("SKIP blocks cannot be trained on")
        return 1.0 if label is BlockLabel.FAKE else -1.0
    val = float(label)
    if val not in (1.0, -1.0):
        raise ValueError("labels must be BlockLabel or +/-1")
    return val


def train_model(features, labels, regularization: float = 1e-4,
                epochs: int = 20, seed: int = 0, scale_floor: float = 3e-5,
                objective_trace: list | None = None) -> LinearModel:
    """Fit the linear classifier by stochastic subgradient descent.

    Regularized hinge loss, step 1/(lambda t), projection onto the
    1/sqrt(lambda) ball, and an averaged iterate as the returned model.
    The averaged weights converge far more smoothly than the raw ones,
    which is what makes the per-epoch objective usable as a sanity
    trace.  Deterministic for a fixed seed.

    When ``objective_trace`` is a list, the full-set objective of the
    averaged iterate is appended after every epoch.
    """
    if regularization <= 0.0:
        raise ValueError("regularization must be positive")
    if epochs < 1:
        raise ValueError("need at least one epoch")
    if scale_floor <= 0.0:
        raise ValueError("scale_floor must be positive")

    x = np.array([f.bins if isinstance(f, FeatureVector) else f
                  for f in features], dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("no training features")
    y = np.array([_label_sign(lbl) for lbl in labels], dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise ValueError("feature/label count mismatch")
    if np.all(y > 0) or np.all(y < 0):
        raise ValueError("training needs both classes")

    # scale_floor stops near-constant bins from being amplified into
    # noise: one gram in a 128x128 block is about 3.2e-5 of histogram
    # mass, so anything below that is sub-single-count jitter
    mean = x.mean(axis=0)
    scale = np.maximum(x.std(axis=0), scale_floor)
    z = (x - mean) / scale

    lam = float(regularization)
    n, dim = z.shape
    rng = np.random.default_rng(seed)
    w = np.zeros(dim)
    b = 0.0
    w_sum = np.zeros(dim)
    b_sum = 0.0
    radius = 1.0 / np.sqrt(lam)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            if y[i] * (z[i] @ w + b) < 1.0:
                w *= 1.0 - eta * lam
                w += eta * y[i] * z[i]
                # the intercept is not regularized; with the 1/(lam t)
                # step its first update would be 1/lam, so it gets a
                # plain 1/t schedule instead
                b += y[i] / t
            else:
                w *= 1.0 - eta * lam
            nrm = float(np.linalg.norm(w))
            if nrm > radius:
                w *= radius / nrm
            w_sum += w
            b_sum += b
        if objective_trace is not None:
            wa = w_sum / t
            ba = b_sum / t
            hinge = np.maximum(0.0, 1.0 - y * (z @ wa + ba)).mean()
            objective_trace.append(0.5 * lam * float(wa @ wa) + float(hinge))

    w_avg = w_sum / t
    b_avg = b_sum / t
    nrm = float(np.linalg.norm(w_avg))
    margin = 1.0 / nrm if nrm > 0.0 else 1.0
    return LinearModel(w_avg, float(b_avg), mean, scale, margin)


def sdh_map(image: RgbImage, model: LinearModel, block: int = BLOCK_SIZE,
            stride: int = BLOCK_STRIDE) -> SdhMap:
    """Aggregate signed hyperplane distances over a sliding-block cover.

    Every pixel accumulates the distances of all blocks containing it
    (positive = forged side), so interior pixels integrate evidence
    from ceil(block/stride)^2 overlapping positions.  Accumulation runs
    in fixed row-major block order, which keeps the float sums
    reproducible.
    """
    h, w = image.shape
    if h < block or w < block:
        raise ValueError("image smaller than one block")
    lum = image.luminance().data
    acc = np.zeros((h, w))
    cov = np.zeros((h, w), dtype=np.int32)
    for oy in block_origins(h, block, stride):
        for ox in block_origins(w, block, stride):
            fv = residual_features(lum[oy:oy + block, ox:ox + block],
                                   origin=(oy, ox))
            d = model.distance(fv.bins)
            acc[oy:oy + block, ox:ox + block] += d
            cov[oy:oy + block, ox:ox + block] += 1
    return SdhMap(Plane(acc), cov)


def splicing_mask(sdh: SdhMap, fraction: float = 0.25) -> TamperMask:
    """Threshold the aggregated map at a fraction of its maximum.

    Negative (genuine-side) evidence is clamped to zero first so that a
    strongly pristine neighbourhood cannot shift the maximum-relative
    threshold.  A map with no positive mass yields an all-genuine mask.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    vals = np.maximum(sdh.plane.data, 0.0)
    peak = float(vals.max())
    if peak <= 0.0:
        bits = np.zeros(sdh.plane.shape, dtype=bool)
    else:
        bits = morph_clean(vals > fraction * peak)
    return TamperMask(bits, MaskSource.SPLICING)


# --- model file I/O ---


def save_model(model: LinearModel, path) -> None:
    """Little-endian binary dump: magic, u32 dim, then the five fields."""
    dim = model.weights.size
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", dim))
        fh.write(np.asarray(model.weights, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", model.bias))
        fh.write(np.asarray(model.feature_mean, dtype="<f8").tobytes())
        fh.write(np.asarray(model.feature_scale, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", model.margin_scale))


def load_model(path) -> LinearModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MODEL_MAGIC:
        raise ValueError("not a classifier model file: %s" % path)
    (dim,) = struct.unpack_from("<I", blob, 8)
    expect = 8 + 4 + 8 * (3 * dim + 2)
    if len(blob) != expect:
        raise ValueError("model file is truncated or padded")
    off = 12
    w = np.frombuffer(blob, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    (bias,) = struct.unpack_from("<d", blob, off)
    off += 8
    mean = np.frombuffer(blob, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    scale = np.frombuffer(blob, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    (margin,) = struct.unpack_from("<d", blob, off)
    return LinearModel(w, bias, mean, scale, margin)
