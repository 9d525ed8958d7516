"""Copy-move localization from dense self-matching.

A copied-and-pasted region shows up as a patch of the image whose best
match elsewhere in the same image is nearly exact.  We compute an
approximate nearest-neighbor field over 7x7 patches with PatchMatch,
repeat the matching against rotated and rescaled renderings of the image
to catch transformed pastes, keep only pixels whose displacement agrees
with their neighborhood, and verify each candidate displacement with a
dense windowed correlation before emitting region pairs.
"""

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numba import njit
from scipy import ndimage

from .imgcore import (
    MaskSource,
    Plane,
    disc_element,
    RgbImage,
    TamperMask,
    morph_clean,
    warp_rotate_scale,
    warp_support,
    windowed_pearson,
)
from .prnu import CorrelationField

__all__ = [
    "OffsetField",
    "TransformSpec",
    "PairRole",
    "CopyRegionPair",
    "DEFAULT_SWEEP",
    "compute_nnf",
    "sweep_transforms",
    "filter_offset_field",
    "extract_copy_regions",
    "disambiguate_source",
    "copymove_mask",
    "save_offset_field_png",
]

DEFAULT_PATCH = 7
DEFAULT_MIN_DISPLACEMENT = 8


@dataclass(frozen=True)
class TransformSpec:
    """One rendering of the image to match against: rotate, then scale."""

    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError("scale must be > 0")

    @property
    def is_identity(self):
        return self.rotation % 360.0 == 0.0 and self.scale == 1.0

    def inverse(self):
        return TransformSpec((-self.rotation) % 360.0, 1.0 / self.scale)


DEFAULT_SWEEP = tuple(
    TransformSpec(rot, sc)
    for rot in (0.0, 90.0, 180.0, 270.0)
    for sc in (0.8, 1.0, 1.25)
)


@dataclass(frozen=True)
class OffsetField:
    """Per-pixel displacement (dx, dy) into a target image plus match cost.

    offsets[y, x, 0] is dx and offsets[y, x, 1] is dy; the matched patch
    center is (y + dy, x + dx) in the target geometry, which has shape
    target_shape and need not equal the source shape.  cost_history, when
    recorded, holds one cost snapshot per PatchMatch round.
    """

    offsets: np.ndarray
    costs: np.ndarray
    target_shape: tuple
    patch: int = DEFAULT_PATCH
    cost_history: np.ndarray = None

    def __post_init__(self):
        assert self.offsets.ndim == 3 and self.offsets.shape[2] == 2
        assert self.costs.shape == self.offsets.shape[:2]
        if not np.all(self.costs >= 0.0):
            raise ValueError("match costs must be >= 0")
        h, w = self.costs.shape
        hb, wb = self.target_shape
        ty = self.offsets[..., 1] + np.arange(h)[:, None]
        tx = self.offsets[..., 0] + np.arange(w)[None, :]
        if ty.min() < 0 or tx.min() < 0 or ty.max() >= hb or tx.max() >= wb:
            raise ValueError("offset targets leave the target image")

    @property
    def height(self):
        return self.costs.shape[0]

    @property
    def width(self):
        return self.costs.shape[1]


class PairRole(Enum):
    UNKNOWN = "unknown"
    A_SOURCE = "a_source"
    B_SOURCE = "b_source"


@dataclass(frozen=True)
class CopyRegionPair:
    """Two matched regions and the displacement that links them.

    region_a is where the dense verification fired; region_b is its
    mirror, mapped back into image coordinates through the transform the
    field was computed under.  role says which side, if either, was
    identified as the untouched source.
    """

    region_a: np.ndarray
    region_b: np.ndarray
    offset: tuple
    verification_corr: float
    role: PairRole = PairRole.UNKNOWN

    def __post_init__(self):
        assert self.region_a.dtype == bool and self.region_b.dtype == bool
        assert self.region_a.shape == self.region_b.shape
        if np.any(self.region_a & self.region_b):
            raise ValueError("matched regions must be disjoint")


# ---------------------------------------------------------------------------
# PatchMatch kernel.  Sequential by construction: propagation feeds each
# pixel from already-updated neighbors, so the scan order is part of the
# algorithm and the kernel is single-threaded and bit-deterministic.

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True)
def _sm64(state):
    # splitmix64: cheap, full-period, and easy to keep bit-identical
    state = state + _SM64_GAMMA
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _patch_cost(a, b, amean, bmean, ay, ax, by, bx, pr, best):
    """Mean-removed RGB SSD between two patches, aborting at `best`.

    The partial sum returned after an abort is only ever used to reject
    the candidate; a completed loop returns the exact cost.
    """
    am0 = amean[ay, ax, 0]
    am1 = amean[ay, ax, 1]
    am2 = amean[ay, ax, 2]
    bm0 = bmean[by, bx, 0]
    bm1 = bmean[by, bx, 1]
    bm2 = bmean[by, bx, 2]
    total = 0.0
    for dy in range(-pr, pr + 1):
        for dx in range(-pr, pr + 1):
            d0 = (a[ay + dy, ax + dx, 0] - am0) - (b[by + dy, bx + dx, 0] - bm0)
            d1 = (a[ay + dy, ax + dx, 1] - am1) - (b[by + dy, bx + dx, 1] - bm1)
            d2 = (a[ay + dy, ax + dx, 2] - am2) - (b[by + dy, bx + dx, 2] - bm2)
            total += d0 * d0 + d1 * d1 + d2 * d2
            if total >= best:
                return total
    return total


@njit(cache=True)
def _too_close(ay, ax, by, bx, wlin, woff, md2):
    """Trivial-correspondence test: is (by, bx) within the displacement
    floor of where the warp sends (ay, ax)?

    For the identity warp this is plain |offset| < floor; for a scaled or
    rotated rendering it rejects the global self-correspondence, which
    would otherwise match the entire image coherently.
    """
    wy = wlin[0, 0] * ay + wlin[0, 1] * ax + woff[0]
    wx = wlin[1, 0] * ay + wlin[1, 1] * ax + woff[1]
    dy = by - wy
    dx = bx - wx
    return dy * dy + dx * dx < md2


@njit(cache=True)
def _match_kernel(a, b, amean, bmean, bvalid, patch, iterations, min_disp,
                  wlin, woff, seed, offsets, costs, history):
    h, w = a.shape[0], a.shape[1]
    hb, wb = b.shape[0], b.shape[1]
    pr = patch // 2
    md2 = float(min_disp) * float(min_disp)
    span_y = hb - 2 * pr
    span_x = wb - 2 * pr
    state = np.uint64(seed) ^ np.uint64(0xD1B54A32D192ED03)
    state, _ = _sm64(state)

    big = 1e30
    for ay in range(pr, h - pr):
        for ax in range(pr, w - pr):
            by = -1
            bx = -1
            for _ in range(2000):
                state, v = _sm64(state)
                cy = pr + int(v % np.uint64(span_y))
                state, v = _sm64(state)
                cx = pr + int(v % np.uint64(span_x))
                if bvalid[cy, cx] and not _too_close(ay, ax, cy, cx, wlin,
                                                     woff, md2):
                    by = cy
                    bx = cx
                    break
            if by < 0:
                # deterministic fallback: first legal target in scan order
                for cy in range(pr, hb - pr):
                    for cx in range(pr, wb - pr):
                        if bvalid[cy, cx] and not _too_close(
                                ay, ax, cy, cx, wlin, woff, md2):
                            by = cy
                            bx = cx
                            break
                    if by >= 0:
                        break
            if by < 0:
                raise ValueError("no legal match target for some pixel")
            offsets[ay, ax, 0] = bx - ax
            offsets[ay, ax, 1] = by - ay
            costs[ay, ax] = _patch_cost(a, b, amean, bmean, ay, ax, by, bx,
                                        pr, big)
            if min_disp == 0:
                # seed the self candidate; ties prefer it so that a
                # self-match settles at zero offset everywhere
                if pr <= ay < hb - pr and pr <= ax < wb - pr and bvalid[ay, ax]:
                    c0 = _patch_cost(a, b, amean, bmean, ay, ax, ay, ax, pr,
                                     big)
                    if c0 <= costs[ay, ax]:
                        offsets[ay, ax, 0] = 0
                        offsets[ay, ax, 1] = 0
                        costs[ay, ax] = c0

    rmax = hb if hb > wb else wb
    for it in range(iterations):
        forward = it % 2 == 0
        for yi in range(pr, h - pr):
            ay = yi if forward else h - 1 - yi
            for xi in range(pr, w - pr):
                ax = xi if forward else w - 1 - xi
                best = costs[ay, ax]
                bdx = offsets[ay, ax, 0]
                bdy = offsets[ay, ax, 1]
                # propagation: adopt the offset of the two neighbors
                # already visited this scan
                for n in range(2):
                    if forward:
                        ny = ay - 1 if n == 0 else ay
                        nx = ax if n == 0 else ax - 1
                    else:
                        ny = ay + 1 if n == 0 else ay
                        nx = ax if n == 0 else ax + 1
                    if ny < pr or ny >= h - pr or nx < pr or nx >= w - pr:
                        continue
                    cdx = offsets[ny, nx, 0]
                    cdy = offsets[ny, nx, 1]
                    if cdx == bdx and cdy == bdy:
                        continue
                    by = ay + cdy
                    bx = ax + cdx
                    if by < pr or by >= hb - pr or bx < pr or bx >= wb - pr:
                        continue
                    if not bvalid[by, bx]:
                        continue
                    if _too_close(ay, ax, by, bx, wlin, woff, md2):
                        continue
                    c = _patch_cost(a, b, amean, bmean, ay, ax, by, bx, pr,
                                    best)
                    if c < best:
                        best = c
                        bdx = cdx
                        bdy = cdy
                # exponential random search around the current target
                radius = rmax
                while radius >= 1:
                    state, v = _sm64(state)
                    oy = int(v % np.uint64(2 * radius + 1)) - radius
                    state, v = _sm64(state)
                    ox = int(v % np.uint64(2 * radius + 1)) - radius
                    by = ay + bdy + oy
                    bx = ax + bdx + ox
                    radius //= 2
                    if by < pr or by >= hb - pr or bx < pr or bx >= wb - pr:
                        continue
                    if not bvalid[by, bx]:
                        continue
                    cdy = by - ay
                    cdx = bx - ax
                    if cdx == bdx and cdy == bdy:
                        continue
                    if _too_close(ay, ax, by, bx, wlin, woff, md2):
                        continue
                    c = _patch_cost(a, b, amean, bmean, ay, ax, by, bx, pr,
                                    best)
                    if c < best:
                        best = c
                        bdx = cdx
                        bdy = cdy
                offsets[ay, ax, 0] = bdx
                offsets[ay, ax, 1] = bdy
                costs[ay, ax] = best
        if history.shape[0] > 0:
            for yy in range(h):
                for xx in range(w):
                    history[it, yy, xx] = costs[yy, xx]


def _patch_means(arr, patch):
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[..., c] = ndimage.uniform_filter(arr[..., c], size=patch)
    return out


def _replicate_border(offsets, costs, pr, target_shape):
    """Fill the patch margin by edge replication, clamping targets."""
    h, w = costs.shape
    inner = (slice(pr, h - pr), slice(pr, w - pr))
    pad = ((pr, pr), (pr, pr))
    costs = np.pad(costs[inner], pad, mode="edge")
    off = np.stack(
        [np.pad(offsets[inner + (i,)], pad, mode="edge") for i in range(2)],
        axis=-1,
    )
    hb, wb = target_shape
    ty = np.clip(off[..., 1] + np.arange(h)[:, None], 0, hb - 1)
    tx = np.clip(off[..., 0] + np.arange(w)[None, :], 0, wb - 1)
    off[..., 1] = ty - np.arange(h)[:, None]
    off[..., 0] = tx - np.arange(w)[None, :]
    return off, costs


def _match_images(a_arr, b_arr, bvalid, patch, iterations, min_displacement,
                  seed, wlin=None, woff=None, track_costs=False):
    assert patch % 2 == 1 and patch >= 3
    assert iterations >= 1
    h, w = a_arr.shape[:2]
    hb, wb = b_arr.shape[:2]
    if min(h, w, hb, wb) <= patch:
        raise ValueError("image not larger than the patch size")
    if wlin is None:
        wlin = np.eye(2)
    if woff is None:
        woff = np.zeros(2)
    identity = np.allclose(wlin, np.eye(2)) and np.allclose(woff, 0.0)
    if identity:
        max_dy = max(h, hb) - patch
        max_dx = max(w, wb) - patch
        if float(min_displacement) ** 2 > max_dy * max_dy + max_dx * max_dx:
            raise ValueError("min_displacement too large for the image")
    pr = patch // 2
    valid = np.ascontiguousarray(bvalid.astype(np.uint8))
    if not valid[pr : hb - pr, pr : wb - pr].any():
        raise ValueError("no valid target patches to match against")
    a = np.ascontiguousarray(a_arr, dtype=np.float64)
    b = np.ascontiguousarray(b_arr, dtype=np.float64)
    amean = _patch_means(a, patch)
    bmean = _patch_means(b, patch)
    offsets = np.zeros((h, w, 2), dtype=np.int32)
    costs = np.zeros((h, w), dtype=np.float64)
    hist_n = iterations if track_costs else 0
    history = np.zeros((hist_n, h, w), dtype=np.float64)
    _match_kernel(a, b, amean, bmean, valid, patch, iterations,
                  int(min_displacement), np.ascontiguousarray(wlin),
                  np.ascontiguousarray(woff), np.uint64(seed), offsets,
                  costs, history)
    offsets, costs = _replicate_border(offsets, costs, pr, (hb, wb))
    return OffsetField(
        offsets=offsets,
        costs=costs,
        target_shape=(hb, wb),
        patch=patch,
        cost_history=history if track_costs else None,
    )


def compute_nnf(image: RgbImage, patch=DEFAULT_PATCH, iterations=5,
                min_displacement=DEFAULT_MIN_DISPLACEMENT, seed=0,
                track_costs=False) -> OffsetField:
    """Approximate nearest-neighbor field of an image against itself."""
    arr = image.as_array()
    bvalid = np.ones(arr.shape[:2], dtype=bool)
    return _match_images(arr, arr, bvalid, patch, iterations,
                         min_displacement, seed, track_costs=track_costs)


def _warped_arrays(image: RgbImage, spec: TransformSpec):
    arr = image.as_array()
    if spec.is_identity:
        return arr, np.eye(2), np.zeros(2), np.ones(arr.shape[:2], dtype=bool)
    channels = []
    for c in range(3):
        warped, lin, off = warp_rotate_scale(arr[..., c], spec.rotation,
                                             spec.scale)
        channels.append(warped)
    support = warp_support(arr.shape[:2], spec.rotation, spec.scale)
    return np.stack(channels, axis=-1), lin, off, support


def sweep_transforms(image: RgbImage, specs=None, patch=DEFAULT_PATCH,
                     iterations=5,
                     min_displacement=DEFAULT_MIN_DISPLACEMENT, seed=0):
    """Match the image against several renderings of itself.

    Returns a list of (TransformSpec, OffsetField).  The identity spec is
    always evaluated first so a plain rigid copy-move never depends on the
    sweep configuration.
    """
    if specs is None:
        specs = DEFAULT_SWEEP
    specs = list(specs)
    if not specs:
        raise ValueError("specs must be nonempty")
    if not any(s.is_identity for s in specs):
        specs.insert(0, TransformSpec())
    else:
        specs.sort(key=lambda s: 0 if s.is_identity else 1)
    out = []
    for idx, spec in enumerate(specs):
        b_arr, lin, off, support = _warped_arrays(image, spec)
        if support.all():
            bvalid = support
        else:
            bvalid = ndimage.minimum_filter(
                support.astype(np.uint8), size=patch) > 0
        field = _match_images(image.as_array(), b_arr, bvalid, patch,
                              iterations, min_displacement,
                              seed + 1000003 * idx, wlin=lin, woff=off)
        out.append((spec, field))
    return out


def filter_offset_field(field: OffsetField, window=9, tolerance=2) -> Plane:
    """Coherence of the offset field under a componentwise median.

    For each pixel: the fraction of window neighbors whose offset is
    within `tolerance` (Chebyshev) of the window's median offset.
    Constant fields score 1, i.i.d. random fields near 0.
    """
    assert window % 2 == 1 and window >= 3
    dx = field.offsets[..., 0].astype(np.float64)
    dy = field.offsets[..., 1].astype(np.float64)
    med_dx = ndimage.median_filter(dx, size=window, mode="nearest")
    med_dy = ndimage.median_filter(dy, size=window, mode="nearest")
    h, w = dx.shape
    r = window // 2
    pdx = np.pad(dx, r, mode="constant", constant_values=np.inf)
    pdy = np.pad(dy, r, mode="constant", constant_values=np.inf)
    agree = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for oy in range(window):
        for ox in range(window):
            sdx = pdx[oy : oy + h, ox : ox + w]
            sdy = pdy[oy : oy + h, ox : ox + w]
            inside = np.isfinite(sdx)
            ok = (
                inside
                & (np.abs(sdx - med_dx) <= tolerance)
                & (np.abs(sdy - med_dy) <= tolerance)
            )
            agree += ok
            count += inside
    return Plane(agree / count)


def _patch_variance(lum, patch=7):
    m = ndimage.uniform_filter(lum, size=patch)
    m2 = ndimage.uniform_filter(lum * lum, size=patch)
    return np.maximum(m2 - m * m, 0.0)


def _duplicate_cost_floor(image: RgbImage, patch: int) -> float:
    """Expected patch match cost of a true duplicate pair.

    Two copies of the same content differ only by two independent noise
    draws, so their mean-removed RGB SSD concentrates around
    2 * patch^2 * sum_c sigma_c^2.  Channel noise is estimated robustly
    from horizontal first differences, the same way the denoiser does it.
    """
    total = 0.0
    for chan in (image.r, image.g, image.b):
        d = np.diff(chan.data, axis=1)
        sigma = 1.4826 * np.median(np.abs(d)) / np.sqrt(2.0) if d.size else 0.0
        total += sigma * sigma
    return 2.0 * patch * patch * total


def _dominant_offsets(seeds, dx, dy, min_component=32, fold_negatives=True,
                      mode_floor=0.2):
    """Concentrated offsets of each connected seed component, deduplicated.

    A component nominates every offset that covers at least `mode_floor`
    of it (and min_component pixels).  A genuine duplicate is matched by
    one constant displacement and dominates its component even when the
    component has absorbed neighboring coherent pixels; a drifting field
    (the residue of a near-trivial match against a rescaled rendering)
    changes offset every few pixels and concentrates on nothing.

    Under the identity transform an offset and its negative describe the
    same source/target pair (the dense map plus its mirror covers both
    sides), so they are folded together; warped fields keep each sign.
    """
    labels, n = ndimage.label(seeds, structure=np.ones((3, 3), dtype=int))
    found = []
    seen = set()
    for li in range(1, n + 1):
        sel = labels == li
        size = int(sel.sum())
        if size < min_component:
            continue
        packed = (dx[sel].astype(np.int64) + (1 << 20)) * (1 << 21) + (
            dy[sel].astype(np.int64) + (1 << 20)
        )
        vals, counts = np.unique(packed, return_counts=True)
        floor = max(min_component, int(mode_floor * size))
        for top in vals[counts >= floor]:
            odx = int(top // (1 << 21)) - (1 << 20)
            ody = int(top % (1 << 21)) - (1 << 20)
            if fold_negatives:
                key = max((odx, ody), (-odx, -ody))
            else:
                key = (odx, ody)
            near = any(
                max(abs(key[0] - k[0]), abs(key[1] - k[1])) <= 2
                for k in seen
            )
            if near:
                continue
            seen.add(key)
            found.append((odx, ody))
    return found


def _shift_into(src, dy, dx, out_shape):
    """out[y, x] = src[y + dy, x + dx] where defined, else 0."""
    h, w = out_shape
    hs, ws = src.shape
    out = np.zeros(out_shape, dtype=src.dtype)
    y0 = max(0, -dy)
    y1 = min(h, hs - dy)
    x0 = max(0, -dx)
    x1 = min(w, ws - dx)
    if y1 > y0 and x1 > x0:
        out[y0:y1, x0:x1] = src[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    return out


def _mirror_region(region, offset, lin, warp_offset, shape):
    """Map region_a + offset back through the warp into image coords."""
    ys, xs = np.nonzero(region)
    if ys.size == 0:
        return np.zeros(shape, dtype=bool)
    ty = ys + offset[1] - warp_offset[0]
    tx = xs + offset[0] - warp_offset[1]
    inv = np.linalg.inv(lin)
    py = inv[0, 0] * ty + inv[0, 1] * tx
    px = inv[1, 0] * ty + inv[1, 1] * tx
    py = np.rint(py).astype(int)
    px = np.rint(px).astype(int)
    keep = (py >= 0) & (py < shape[0]) & (px >= 0) & (px < shape[1])
    out = np.zeros(shape, dtype=bool)
    out[py[keep], px[keep]] = True
    # fill the rounding pinholes a downscaled mirror would otherwise have
    out = ndimage.binary_closing(out, structure=np.ones((3, 3), dtype=bool))
    return out


def extract_copy_regions(image: RgbImage, fields, coherence_threshold=0.5,
                         corr_threshold=0.85,
                         min_displacement=DEFAULT_MIN_DISPLACEMENT,
                         flat_variance_floor=1.0, min_area=1000,
                         coherence_window=9, coherence_tolerance=2,
                         verify_window=16, verify_mean_floor=0.95,
                         cost_fraction=0.5, cost_noise_factor=4.0):
    """Turn swept offset fields into verified copy region pairs.

    Seeds are coherent, non-flat pixels; each seed component nominates its
    most common offset; every nominated displacement is then verified by
    densely correlating the image against its shifted (and warp
    compensated) rendering.  Pixels passing the correlation threshold
    after cleanup become region_a, and region_b is its displaced mirror.

    The threshold applies to a windowed correlation, so the raw pass
    region is the true duplicate eroded by roughly half the window; a
    compensating dilation is applied after cleanup.
    """
    if not 0.0 < coherence_threshold <= 1.0:
        raise ValueError("coherence_threshold must be in (0, 1]")
    if not 0.0 < corr_threshold <= 1.0:
        raise ValueError("corr_threshold must be in (0, 1]")
    if min_area <= 0:
        raise ValueError("min_area must be > 0")
    lum = image.luminance().data
    var = _patch_variance(lum)
    shape = lum.shape
    yy = np.arange(shape[0])[:, None]
    xx = np.arange(shape[1])[None, :]
    pairs = []
    for spec, fld in fields:
        coh = filter_offset_field(fld, window=coherence_window,
                                  tolerance=coherence_tolerance).data
        dx = fld.offsets[..., 0]
        dy = fld.offsets[..., 1]
        b_arr, lin, woff, support = _warped_arrays(image, spec)
        # distance from the warp's own correspondence, not from zero:
        # the floor must reject the global self-match of a scaled field
        wy = lin[0, 0] * yy + lin[0, 1] * xx + woff[0]
        wx = lin[1, 0] * yy + lin[1, 1] * xx + woff[1]
        far = (yy + dy - wy) ** 2 + (xx + dx - wx) ** 2
        far = far >= float(min_displacement) ** 2
        seeds = (coh >= coherence_threshold) & (var >= flat_variance_floor)
        seeds &= far
        if not seeds.any():
            continue
        b_lum = (
            0.299 * b_arr[..., 0]
            + 0.587 * b_arr[..., 1]
            + 0.114 * b_arr[..., 2]
        )
        # a true duplicate pays only the noise floor, so it must never be
        # rejected for that; the median-relative part still screens smooth
        # coincidences on images whose chance matches are expensive
        cost_ceiling = max(cost_fraction * float(np.median(fld.costs)),
                           cost_noise_factor * _duplicate_cost_floor(image, fld.patch))
        for odx, ody in _dominant_offsets(seeds, dx, dy,
                                          fold_negatives=spec.is_identity):
            shifted = _shift_into(b_lum, ody, odx, shape)
            cover = _shift_into(support.astype(np.float64), ody, odx, shape)
            corr = windowed_pearson(lum, shifted, verify_window)
            corr = np.where(cover > 0.5, corr, 0.0)
            mask = corr >= corr_threshold
            mask = morph_clean(mask, radius=2, min_area=min_area)
            if not mask.any():
                continue
            score = float(corr[mask].mean())
            if score < verify_mean_floor:
                # a genuine duplicate correlates near-perfectly over its
                # whole region; smooth-content coincidences plateau lower
                continue
            if float(fld.costs[mask].mean()) > cost_ceiling:
                # duplicates match their counterpart almost exactly, so
                # their region sits far below the field's typical cost;
                # chance correlations still pay full price for the
                # uncopied noise
                continue
            grow = verify_window // 2 - 2
            if grow > 0:
                mask = ndimage.binary_dilation(mask,
                                               structure=disc_element(grow))
            region_b = _mirror_region(mask, (odx, ody), lin, woff, shape)
            region_b &= ~mask
            if not region_b.any():
                continue
            pairs.append(
                CopyRegionPair(
                    region_a=mask,
                    region_b=region_b,
                    offset=(odx, ody),
                    verification_corr=score,
                )
            )
    return pairs


def disambiguate_source(pair: CopyRegionPair, field, pce_floor=150.0,
                        min_region=3000) -> CopyRegionPair:
    """Use sensor-pattern correlation to tell source from paste.

    The pasted side overwrote the sensor pattern, so its mean correlation
    against the camera fingerprint drops.  Only trusted when the field's
    PCE clears pce_floor and both regions are large enough to average
    over; otherwise both sides stay marked.
    """
    if field is None or field.pce <= pce_floor:
        return replace(pair, role=PairRole.UNKNOWN)
    if pair.region_a.sum() < min_region or pair.region_b.sum() < min_region:
        return replace(pair, role=PairRole.UNKNOWN)
    rho = field.plane.data
    mean_a = float(rho[pair.region_a].mean())
    mean_b = float(rho[pair.region_b].mean())
    role = PairRole.A_SOURCE if mean_a >= mean_b else PairRole.B_SOURCE
    return replace(pair, role=role)


def copymove_mask(pairs, dims) -> TamperMask:
    """Union of the tampered sides of every region pair."""
    bits = np.zeros(dims, dtype=bool)
    for pair in pairs:
        assert pair.region_a.shape == tuple(dims)
        if pair.role is PairRole.A_SOURCE:
            bits |= pair.region_b
        elif pair.role is PairRole.B_SOURCE:
            bits |= pair.region_a
        else:
            bits |= pair.region_a
            bits |= pair.region_b
    return TamperMask(bits, MaskSource.COPYMOVE)


def save_offset_field_png(field: OffsetField, path):
    """Debug rendering: dx and dy around mid-gray, cost in the blue plane."""
    from PIL import Image

    dx = np.clip(field.offsets[..., 0] + 128, 0, 255)
    dy = np.clip(field.offsets[..., 1] + 128, 0, 255)
    ceil = np.percentile(field.costs, 99.0)
    cost = np.clip(field.costs / max(ceil, 1e-12) * 255.0, 0, 255)
    rgb = np.stack([dx, dy, cost], axis=-1).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)
