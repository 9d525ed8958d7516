"""Synthetic ground truth: procedural scenes, simulated cameras, forgeries.

The imaging model is y = clamp((1 + k) * x + theta, 0, 255) per channel,
with a fixed multiplicative sensor pattern k shared by all channels of one
camera and i.i.d. Gaussian read noise theta drawn per shot.  Forgeries
paste pixel content verbatim, so a pasted region carries the sensor
pattern of wherever its content came from rather than the pattern of the
camera that shot the host image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import (
    MaskSource,
    Plane,
    RgbImage,
    TamperMask,
    save_image,
    save_mask,
    warp_rotate_scale,
    warp_support,
    write_manifest,
)

__all__ = [
    "SyntheticCamera",
    "ForgeryKind",
    "ForgerySpec",
    "make_camera",
    "make_scene",
    "shoot",
    "forge",
    "emit_corpus",
]

# fixed per-channel scene gains, so color planes are correlated but not equal
_CHANNEL_GAINS = (1.0, 0.94, 0.88)


@dataclass(frozen=True)
class SyntheticCamera:
    """A simulated sensor: multiplicative pattern k plus read-noise level."""

    k: Plane
    noise_std: float
    id: str

    def __post_init__(self):
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")


def make_camera(shape, sigma_k: float = 0.02, noise_std: float = 0.7,
                seed: int = 0, cam_id: str = "cam",
                pattern_scale: float = 2.0) -> SyntheticCamera:
    """Draw a camera with a zero-mean sensor pattern of std sigma_k.

    The pattern is low-pass white noise (Gaussian kernel, `pattern_scale`
    pixels), not pixel-white: physical PRNU has spatial extent from
    charge diffusion and microlens crosstalk.  Band-limiting it also
    keeps the sensor pattern out of the third-difference band that
    residual co-occurrence features live in, so those features see the
    read noise and any pasted seams, not the multiplicative pattern.
    """
    if not 0.0 < sigma_k <= 0.1:
        raise ValueError("sigma_k must be in (0, 0.1]")
    if pattern_scale < 0.0:
        raise ValueError("pattern_scale must be >= 0")
    rng = np.random.default_rng(seed)
    k = rng.normal(0.0, 1.0, shape)
    if pattern_scale > 0.0:
        k = ndimage.gaussian_filter(k, pattern_scale)
    k -= k.mean()
    k *= sigma_k / max(k.std(), 1e-12)
    return SyntheticCamera(Plane(k), noise_std, cam_id)


def _resize_bilinear(arr: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    ih, iw = arr.shape
    yy = np.linspace(0.0, ih - 1.0, h)
    xx = np.linspace(0.0, iw - 1.0, w)
    coords = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(arr, coords, order=1, mode="nearest")


def _value_noise(shape, cells: int, rng) -> np.ndarray:
    """Quintic-interpolated value noise with jittered lattice scale/phase.

    The jitter and the C2 interpolant matter: a fixed lattice spacing
    would leave interpolation creases with the same period in every scene,
    and a correlation search between two unrelated residuals would lock
    onto the lag that aligns them.  With per-scene spacing and no
    curvature discontinuities there is nothing periodic to align.
    """
    h, w = shape
    cy = cells * rng.uniform(0.85, 1.3)
    cx = cells * rng.uniform(0.85, 1.3)
    gy = int(np.ceil(cy)) + 2
    gx = int(np.ceil(cx)) + 2
    grid = rng.normal(0.0, 1.0, (gy + 1, gx + 1))
    fy = (np.arange(h) / h) * cy + rng.uniform(0.0, 1.0)
    fx = (np.arange(w) / w) * cx + rng.uniform(0.0, 1.0)
    iy = np.floor(fy).astype(int)
    ix = np.floor(fx).astype(int)
    ty = fy - iy
    tx = fx - ix
    sy = (ty * ty * ty * (ty * (6.0 * ty - 15.0) + 10.0))[:, None]
    sx = (tx * tx * tx * (tx * (6.0 * tx - 15.0) + 10.0))[None, :]
    g00 = grid[np.ix_(iy, ix)]
    g01 = grid[np.ix_(iy, ix + 1)]
    g10 = grid[np.ix_(iy + 1, ix)]
    g11 = grid[np.ix_(iy + 1, ix + 1)]
    top = g00 * (1.0 - sx) + g01 * sx
    bot = g10 * (1.0 - sx) + g11 * sx
    return top * (1.0 - sy) + bot * sy


def _smootherstep(t: np.ndarray) -> np.ndarray:
    """Quintic easing of [0,1] values; first two derivatives vanish at both ends."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def make_scene(shape, seed: int = 0, n_shapes: int = 4,
               saturated_prob: float = 0.25) -> RgbImage:
    """Procedural test scene: multi-octave value noise, a few soft-edged
    elliptic patches, occasionally a near-saturated blob.

    Everything here is built from C2-smooth profiles and soft range
    compression, never hard clips, so an untouched scene contains no
    abrupt seams at all.  The only sharp discontinuities in a forged
    image are then the paste boundaries themselves, which is precisely
    what residual-statistics detectors key on.  Zero-clipped shadow
    patches are avoided for a different reason: the normalized sensor
    residual floors its divisor at 1 and outlier blocks there would
    dominate correlation peaks.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    # the finest octave stops at ~16 px lattice cells: value-noise cells
    # much smaller than that leave visible third-difference energy of
    # their own, which would mimic the residual signature of a paste seam
    base = np.zeros(shape, dtype=np.float64)
    amp = 1.0
    for cells in (4, 8, 16):
        base += amp * _value_noise(shape, cells, rng)
        amp *= 0.55
    base = 120.0 + 45.0 * base / max(base.std(), 1e-9)

    # Shape contours are wobbled with per-shape noise.  Exact ellipses all
    # belong to one two-parameter family, and two rings of similar radius
    # correlate strongly at the lag that aligns their centers; irregular
    # blobs do not.
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        cy = rng.uniform(0.1 * h, 0.9 * h)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        ry = rng.uniform(0.10 * h, 0.3 * h)
        rx = rng.uniform(0.10 * w, 0.3 * w)
        delta = rng.uniform(25.0, 70.0) * rng.choice([-1.0, 1.0])
        d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        d += 0.35 * _value_noise(shape, 6, rng)
        slope = rng.uniform(0.6, 1.1)
        base += delta * _smootherstep(slope * (1.0 - d))
    base = ndimage.gaussian_filter(base, 1.0)
    # soft-compress into the sensor's working range instead of clipping
    base = 135.0 + 105.0 * np.tanh((base - 135.0) / 105.0)

    if rng.uniform() < saturated_prob:
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        ry = rng.uniform(0.12 * h, 0.20 * h)
        rx = rng.uniform(0.12 * w, 0.20 * w)
        d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        d += 0.25 * _value_noise(shape, 6, rng)
        hot = _smootherstep(rng.uniform(0.8, 1.2) * (1.0 - d))
        base = (1.0 - hot) * base + 252.0 * hot
        base = ndimage.gaussian_filter(base, 1.0)

    # Texture contrast tracks brightness, as shot noise does on a real
    # sensor; it also keeps shadow areas from dominating the normalized
    # residual, whose divisor shrinks with luminance.
    detail_gain = np.clip(base / 150.0, 0.35, 1.2)
    channels = []
    for gain in _CHANNEL_GAINS:
        chan = gain * base + 3.0 * detail_gain * _value_noise(shape, 16, rng)
        channels.append(np.clip(chan, 0.0, 255.0))
    return RgbImage(Plane(channels[0]), Plane(channels[1]), Plane(channels[2]))


def shoot(camera: SyntheticCamera, scene: RgbImage, seed: int = 0) -> RgbImage:
    """Image a scene through a camera: y = clamp((1 + k) x + theta).

    The read noise theta is drawn per channel in r, g, b order from a
    generator seeded with `seed`, so a test can reproduce the exact draws.
    """
    if camera.k.shape != scene.shape:
        raise ValueError("camera pattern and scene dimensions differ")
    rng = np.random.default_rng(seed)
    gain = 1.0 + camera.k.data
    out = []
    for chan in (scene.r, scene.g, scene.b):
        theta = rng.normal(0.0, camera.noise_std, scene.shape)
        out.append(np.clip(gain * chan.data + theta, 0.0, 255.0))
    return RgbImage(Plane(out[0]), Plane(out[1]), Plane(out[2]))


class ForgeryKind(Enum):
    COPY_MOVE = "copy_move"
    SPLICE = "splice"
    INPAINT_LIKE = "inpaint_like"


def _check_rect(rect, shape, what: str) -> None:
    top, left, rh, rw = rect
    h, w = shape
    if rh <= 0 or rw <= 0:
        raise ValueError("%s rectangle must have positive extent" % what)
    if top < 0 or left < 0 or top + rh > h or left + rw > w:
        raise ValueError("%s rectangle %r exceeds image bounds %r" % (what, rect, shape))


@dataclass(frozen=True)
class ForgerySpec:
    """A fully determined forgery: kind, geometry, and the exact truth mask.

    Rectangles are (top, left, height, width).  For COPY_MOVE and SPLICE
    the pasted extent is the bounding box of the source rectangle after
    rotation and scaling; `truth` marks exactly the pixels the paste will
    overwrite.
    """

    kind: ForgeryKind
    image_shape: tuple[int, int]
    target_origin: tuple[int, int]
    source_rect: tuple[int, int, int, int] | None = None
    rotation: float = 0.0
    scale: float = 1.0
    tile: int = 12
    truth: TamperMask = field(default=None)  # filled by the factories

    def __post_init__(self):
        if self.truth is None:
            raise ValueError("use the copy_move / splice / inpaint factories")
        if self.truth.shape != tuple(self.image_shape):
            raise ValueError("truth mask does not match image dimensions")
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")

    @property
    def target_rect(self) -> tuple[int, int, int, int]:
        sup = self._support()
        return (self.target_origin[0], self.target_origin[1], sup.shape[0], sup.shape[1])

    def _support(self) -> np.ndarray:
        if self.kind is ForgeryKind.INPAINT_LIKE:
            return np.ones((self.source_rect[2], self.source_rect[3]), dtype=bool)
        return warp_support(self.source_rect[2:], self.rotation, self.scale)

    @staticmethod
    def _build_truth(shape, origin, support) -> TamperMask:
        bits = np.zeros(shape, dtype=bool)
        ty, tx = origin
        _check_rect((ty, tx, support.shape[0], support.shape[1]), shape, "target")
        bits[ty:ty + support.shape[0], tx:tx + support.shape[1]] = support
        return TamperMask(bits, MaskSource.TRUTH)

    @classmethod
    def copy_move(cls, image_shape, source_rect, target_origin,
                  rotation: float = 0.0, scale: float = 1.0) -> "ForgerySpec":
        _check_rect(source_rect, image_shape, "source")
        support = warp_support(source_rect[2:], rotation, scale)
        truth = cls._build_truth(image_shape, target_origin, support)
        spec = cls(ForgeryKind.COPY_MOVE, tuple(image_shape), tuple(target_origin),
                   tuple(source_rect), rotation, scale, truth=truth)
        return spec

    @classmethod
    def splice(cls, image_shape, donor_shape, donor_rect, target_origin,
               rotation: float = 0.0, scale: float = 1.0) -> "ForgerySpec":
        _check_rect(donor_rect, donor_shape, "donor")
        support = warp_support(donor_rect[2:], rotation, scale)
        truth = cls._build_truth(image_shape, target_origin, support)
        return cls(ForgeryKind.SPLICE, tuple(image_shape), tuple(target_origin),
                   tuple(donor_rect), rotation, scale, truth=truth)

    @classmethod
    def inpaint(cls, image_shape, target_rect, tile: int = 12) -> "ForgerySpec":
        _check_rect(target_rect, image_shape, "target")
        if tile < 2:
            raise ValueError("tile must be >= 2")
        support = np.ones(target_rect[2:], dtype=bool)
        truth = cls._build_truth(image_shape, target_rect[:2], support)
        return cls(ForgeryKind.INPAINT_LIKE, tuple(image_shape), tuple(target_rect[:2]),
                   tuple(target_rect), tile=tile, truth=truth)


def _paste(arr: np.ndarray, fragment: np.ndarray, support: np.ndarray, origin) -> None:
    ty, tx = origin
    region = arr[ty:ty + fragment.shape[0], tx:tx + fragment.shape[1]]
    region[support] = fragment[support]


def forge(image: RgbImage, donor: RgbImage | None, spec: ForgerySpec,
          seed: int = 0) -> tuple[RgbImage, TamperMask]:
    """Apply a forgery spec to a shot image.

    COPY_MOVE copies a (possibly rotated / rescaled) region of the image
    onto itself, SPLICE pastes a region of `donor`, INPAINT_LIKE fills the
    target with small tiles sampled from elsewhere in the same image.
    Pasted values are carried verbatim, so the host sensor pattern is
    destroyed inside the truth region.
    """
    if spec.image_shape != image.shape:
        raise ValueError("spec was built for dimensions %r" % (spec.image_shape,))
    arr = image.as_array().copy()
    rng = np.random.default_rng(seed)

    if spec.kind in (ForgeryKind.COPY_MOVE, ForgeryKind.SPLICE):
        src_img = image if spec.kind is ForgeryKind.COPY_MOVE else donor
        if src_img is None:
            raise ValueError("SPLICE requires a donor image")
        top, left, rh, rw = spec.source_rect
        support = spec._support()
        for c in range(3):
            frag = src_img.as_array()[top:top + rh, left:left + rw, c]
            warped, _, _ = warp_rotate_scale(frag, spec.rotation, spec.scale)
            if warped.shape != support.shape:
                raise ValueError("warped fragment does not match truth geometry")
            _paste(arr[:, :, c], warped, support, spec.target_origin)
    else:
        ty, tx, th, tw = spec.source_rect
        tile = spec.tile
        h, w = image.shape
        for by in range(0, th, tile):
            for bx in range(0, tw, tile):
                bh = min(tile, th - by)
                bw = min(tile, tw - bx)
                # sample a donor tile whose footprint avoids the target rect
                for _ in range(200):
                    sy = int(rng.integers(0, h - bh + 1))
                    sx = int(rng.integers(0, w - bw + 1))
                    if sy + bh <= ty or sy >= ty + th or sx + bw <= tx or sx >= tx + tw:
                        break
                arr[ty + by:ty + by + bh, tx + bx:tx + bx + bw, :] = \
                    arr[sy:sy + bh, sx:sx + bw, :]
    return RgbImage.from_array(np.clip(arr, 0.0, 255.0)), spec.truth


# --- corpus emission ---

def _sample_copy_move(rng, shape, min_offset: int = 24):
    h, w = shape
    for _ in range(500):
        side = int(rng.integers(max(40, h // 5), max(56, int(h * 0.36))))
        rot, scale = 0.0, 1.0
        roll = rng.uniform()
        if roll < 0.20:
            rot = float(rng.choice([90.0, 180.0, 270.0]))
        elif roll < 0.32:
            scale = float(rng.choice([0.8, 1.25]))
        sup_shape = warp_support((side, side), rot, scale).shape
        if sup_shape[0] >= h - 2 or sup_shape[1] >= w - 2:
            continue
        sy = int(rng.integers(0, h - side + 1))
        sx = int(rng.integers(0, w - side + 1))
        ty = int(rng.integers(0, h - sup_shape[0] + 1))
        tx = int(rng.integers(0, w - sup_shape[1] + 1))
        dy, dx = ty - sy, tx - sx
        if dy * dy + dx * dx < min_offset * min_offset:
            continue
        # keep source and pasted footprints disjoint
        if not (ty + sup_shape[0] <= sy or ty >= sy + side
                or tx + sup_shape[1] <= sx or tx >= sx + side):
            continue
        return ForgerySpec.copy_move(shape, (sy, sx, side, side), (ty, tx), rot, scale)
    raise RuntimeError("could not sample copy-move geometry")


def _sample_rect(rng, shape, lo_frac: float, hi_frac: float):
    h, w = shape
    rh = int(rng.integers(int(lo_frac * h), int(hi_frac * h) + 1))
    rw = int(rng.integers(int(lo_frac * w), int(hi_frac * w) + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return (top, left, rh, rw)


def emit_corpus(out_dir, n_images: int = 60, shape=(256, 256), n_cameras: int = 4,
                seed: int = 0, mix=(0.30, 0.30, 0.20, 0.20),
                sigma_k: float = 0.02, noise_std: float = 0.7) -> str:
    """Generate a mixed corpus on disk and return the manifest path.

    `mix` gives the (copy_move, splice, inpaint_like, pristine) fractions.
    Every image gets a truth mask (all genuine for pristine shots).  The
    manifest CSV columns are image, mask, camera, kind with paths relative
    to the manifest location.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if abs(sum(mix) - 1.0) > 1e-9 or any(m < 0 for m in mix):
        raise ValueError("mix fractions must be non-negative and sum to 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    # camera models differ mildly in read-noise level, as real ones do;
    # the spread also gives cross-camera pastes a small statistical
    # footprint on top of the seam itself
    cameras = [make_camera(shape, sigma_k,
                           noise_std * (0.75 + 0.5 * ci / max(1, n_cameras - 1)),
                           seed=1000 + ci, cam_id="cam%02d" % ci)
               for ci in range(n_cameras)]

    kinds: list[ForgeryKind | None] = []
    counts = [int(round(frac * n_images)) for frac in mix]
    while sum(counts) > n_images:
        counts[int(np.argmax(counts))] -= 1
    while sum(counts) < n_images:
        counts[int(np.argmin(counts))] += 1
    for kind, cnt in zip([ForgeryKind.COPY_MOVE, ForgeryKind.SPLICE,
                          ForgeryKind.INPAINT_LIKE, None], counts):
        kinds.extend([kind] * cnt)
    kinds = [kinds[i] for i in rng.permutation(n_images)]

    rows = []
    for i, kind in enumerate(kinds):
        cam = cameras[i % n_cameras]
        scene = make_scene(shape, seed=int(rng.integers(1 << 31)))
        img = shoot(cam, scene, seed=int(rng.integers(1 << 31)))
        if kind is None:
            truth = TamperMask(np.zeros(shape, dtype=bool), MaskSource.TRUTH)
        elif kind is ForgeryKind.COPY_MOVE:
            spec = _sample_copy_move(rng, shape)
            img, truth = forge(img, None, spec, seed=int(rng.integers(1 << 31)))
        elif kind is ForgeryKind.SPLICE:
            donor_cam = cameras[(i + 1 + int(rng.integers(n_cameras - 1))) % n_cameras] \
                if n_cameras > 1 else cam
            donor_scene = make_scene(shape, seed=int(rng.integers(1 << 31)))
            donor = shoot(donor_cam, donor_scene, seed=int(rng.integers(1 << 31)))
            rect = _sample_rect(rng, shape, 0.25, 0.45)
            spec = ForgerySpec.splice(shape, shape, rect, rect[:2])
            img, truth = forge(img, donor, spec, seed=int(rng.integers(1 << 31)))
        else:
            rect = _sample_rect(rng, shape, 0.20, 0.38)
            spec = ForgerySpec.inpaint(shape, rect)
            img, truth = forge(img, None, spec, seed=int(rng.integers(1 << 31)))

        image_id = "img_%03d" % i
        save_image(img, out_dir / "images" / (image_id + ".png"))
        save_mask(truth, out_dir / "masks" / (image_id + ".png"))
        rows.append({
            "image": "images/%s.png" % image_id,
            "mask": "masks/%s.png" % image_id,
            "camera": cam.id,
            "kind": kind.value if kind is not None else "pristine",
        })

    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return str(manifest)
