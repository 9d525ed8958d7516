"""Batch command-line front end for the forgery localization pipeline.

Every stage of the pipeline (clustering, fingerprint estimation,
association, the three detectors, fusion, evaluation) is independently
invokable, and `run` chains them over one corpus manifest.  All
thresholds live in a flat key=value config file overridable per call
with --set; --print-config dumps the effective values.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import copymove, fusion, prnu, splicing, synth
from .imgcore import (
    MaskSource,
    Plane,
    TamperMask,
    load_image,
    load_mask,
    mask_scores,
    read_manifest,
    save_mask,
)

__all__ = ["PipelineConfig", "build_config", "run_pipeline", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

DETECTORS = ("prnu", "copymove", "splicing", "fused")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline in one flat namespace.

    Field names double as config-file keys and --set keys.
    """

    # sensor-pattern thresholds
    clustering_pce: float = 50.0
    association_pce: float = 100.0
    disambiguation_pce: float = 150.0
    fusion_pce: float = 1200.0
    min_cluster_size: int = 5
    exclusion_radius: int = 5
    # sensor-pattern localization
    window: int = 129
    base_threshold: float = 0.45
    pce_ref: float = 500.0
    saturation_level: float = 250.0
    prnu_morph_radius: int = 4
    prnu_min_area: int = 1500
    # splicing detector
    block: int = 128
    stride: int = 16
    sdh_fraction: float = 0.25
    regularization: float = 1e-4
    epochs: int = 20
    # copy-move detector
    patch: int = 7
    iterations: int = 5
    min_displacement: int = 8
    sweep_rotations: str = "0,90,180,270"
    sweep_scales: str = "0.8,1.0,1.25"
    coherence_threshold: float = 0.5
    corr_threshold: float = 0.85
    verify_mean_floor: float = 0.95
    cost_fraction: float = 0.5
    cost_noise_factor: float = 4.0
    flat_variance_floor: float = 1.0
    copymove_min_area: int = 1000
    # general
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        for name in ("clustering_pce", "association_pce", "disambiguation_pce",
                     "fusion_pce", "pce_ref"):
            if getattr(self, name) <= 0.0:
                raise UsageError("%s must be positive" % name)
        if self.window < 3 or self.window % 2 == 0:
            raise UsageError("window must be odd and >= 3")
        if self.patch < 3 or self.patch % 2 == 0:
            raise UsageError("patch must be odd and >= 3")
        if self.block < 8:
            raise UsageError("block must be >= 8")
        if not 1 <= self.stride <= self.block:
            raise UsageError("stride must be in [1, block]")
        if not 0.0 < self.sdh_fraction < 1.0:
            raise UsageError("sdh_fraction must lie in (0, 1)")
        if self.regularization <= 0.0:
            raise UsageError("regularization must be positive")
        if self.epochs < 1 or self.iterations < 1:
            raise UsageError("epochs and iterations must be >= 1")
        if self.min_cluster_size < 1:
            raise UsageError("min_cluster_size must be >= 1")
        if self.min_displacement < 0 or self.exclusion_radius < 0:
            raise UsageError("displacement floor and exclusion radius must be >= 0")
        for name in ("coherence_threshold", "corr_threshold", "verify_mean_floor"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise UsageError("%s must lie in (0, 1]" % name)
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        try:
            specs = self.sweep_specs()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if not specs:
            raise UsageError("transform sweep is empty")

    def sweep_specs(self):
        rotations = [float(v) for v in self.sweep_rotations.split(",") if v.strip()]
        scales = [float(v) for v in self.sweep_scales.split(",") if v.strip()]
        return tuple(copymove.TransformSpec(rot, sc)
                     for rot in rotations for sc in scales)


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError("config key %s expects %s, got %r"
                         % (name, kind.__name__, raw)) from None


def build_config(config_path=None, overrides=()) -> PipelineConfig:
    """Config file first, then --set pairs; unknown keys are usage errors."""
    types = {f.name: f.type for f in dataclass_fields(PipelineConfig)}
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`; map them back
    named = {"int": int, "float": float, "str": str}
    types = {k: named.get(v, str) if isinstance(v, str) else v
             for k, v in types.items()}
    values = {}

    def absorb(key, raw, where):
        key = key.strip()
        if key not in types:
            raise UsageError("unknown config key %r (%s)" % (key, where))
        values[key] = _coerce(key, types[key], raw.strip())

    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise DataError("cannot read config %s: %s" % (config_path, exc)) from exc
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError("config %s line %d is not key=value"
                                 % (config_path, ln))
            key, raw = line.split("=", 1)
            absorb(key, raw, "%s line %d" % (config_path, ln))
    for pair in overrides or ():
        if "=" not in pair:
            raise UsageError("--set expects key=value, got %r" % pair)
        key, raw = pair.split("=", 1)
        absorb(key, raw, "--set")
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


def print_config(cfg: PipelineConfig, stream=None) -> None:
    stream = stream or sys.stdout
    for f in dataclass_fields(PipelineConfig):
        stream.write("%s=%s\n" % (f.name, getattr(cfg, f.name)))


# --- manifest helpers ---

def _image_id(row: dict) -> str:
    return Path(row["image"]).stem


def _load_rows(manifest) -> list[dict]:
    try:
        rows = read_manifest(manifest)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not rows:
        raise DataError("manifest %s lists no images" % manifest)
    return rows


def _load_fingerprints(fp_dir) -> list:
    paths = sorted(Path(fp_dir).glob("fp_*.bin"))
    if not paths:
        raise DataError("no fingerprint files (fp_*.bin) in %s" % fp_dir)
    fps = []
    for i, path in enumerate(paths):
        suffix = path.stem.rpartition("_")[2]
        fp_id = int(suffix) if suffix.isdigit() else i
        fps.append(prnu.load_fingerprint(path, fp_id))
    return fps


def _empty_mask(shape, source) -> TamperMask:
    return TamperMask(np.zeros(shape, dtype=bool), source)


# --- per-image stages ---

def _associate(image, residual, fps, cfg: PipelineConfig):
    """Best cluster id (or None) and best PCE over a fingerprint list."""
    best_id, best = None, -np.inf
    lum = image.luminance().data
    for fp in fps:
        z = Plane(fp.estimate().data * lum)
        score = prnu.pce(residual, z, cfg.exclusion_radius)
        if score > best:
            best, best_id = score, fp.id
    if not np.isfinite(best):
        return None, 0.0
    if best > cfg.association_pce:
        return best_id, float(best)
    return None, float(best)


def _detect_prnu(image, residual, fp, cfg: PipelineConfig):
    field = prnu.correlation_field(image, residual, fp, cfg.window,
                                   cfg.exclusion_radius)
    mask = prnu.prnu_mask(field, image, cfg.base_threshold,
                          cfg.saturation_level, cfg.pce_ref,
                          cfg.prnu_morph_radius, cfg.prnu_min_area)
    return mask, field


def _detect_copymove(image, field, cfg: PipelineConfig):
    fields = copymove.sweep_transforms(image, cfg.sweep_specs(), cfg.patch,
                                       cfg.iterations, cfg.min_displacement,
                                       cfg.seed)
    pairs = copymove.extract_copy_regions(
        image, fields,
        coherence_threshold=cfg.coherence_threshold,
        corr_threshold=cfg.corr_threshold,
        min_displacement=cfg.min_displacement,
        flat_variance_floor=cfg.flat_variance_floor,
        min_area=cfg.copymove_min_area,
        verify_mean_floor=cfg.verify_mean_floor,
        cost_fraction=cfg.cost_fraction,
        cost_noise_factor=cfg.cost_noise_factor)
    if field is not None:
        pairs = [copymove.disambiguate_source(p, field, cfg.disambiguation_pce)
                 for p in pairs]
    return copymove.copymove_mask(pairs, image.shape)


def _train_splicing(rows, cfg: PipelineConfig):
    """Balanced hinge-loss training over every manifest row with a truth mask."""
    feats, labels = [], []
    for row in rows:
        if not row.get("mask"):
            continue
        image = load_image(row["image"])
        truth = load_mask(row["mask"])
        f, l = splicing.training_blocks(image, truth, cfg.stride)
        feats.extend(f)
        labels.extend(l)
    fake = [i for i, l in enumerate(labels) if l is splicing.BlockLabel.FAKE]
    pristine = [i for i, l in enumerate(labels)
                if l is splicing.BlockLabel.PRISTINE]
    if not fake or not pristine:
        raise DataError("training needs both forged and pristine blocks "
                        "(got %d fake, %d pristine)" % (len(fake), len(pristine)))
    keep = min(len(fake), len(pristine))
    rng = np.random.default_rng(cfg.seed)
    chosen = sorted(list(rng.choice(fake, keep, replace=False))
                    + list(rng.choice(pristine, keep, replace=False)))
    return splicing.train_model([feats[i] for i in chosen],
                                [labels[i] for i in chosen],
                                regularization=cfg.regularization,
                                epochs=cfg.epochs, seed=cfg.seed)


def _detect_splicing(image, model, cfg: PipelineConfig):
    if model is None:
        return _empty_mask(image.shape, MaskSource.SPLICING)
    sdh = splicing.sdh_map(image, model, cfg.block, cfg.stride)
    return splicing.splicing_mask(sdh, cfg.sdh_fraction)


# --- worker pool ---
#
# Per-image work is independent; the pool forks after the shared state
# (fingerprints, model, config) is final, results come back in manifest
# order, and all aggregation happens in the parent, so any worker count
# yields identical output.

_SHARED: dict = {}


def _set_shared(**kw) -> None:
    _SHARED.update(kw)


def _pmap(fn, tasks, cfg: PipelineConfig, shared: dict):
    # shared state is set in the parent before the pool forks, so workers
    # inherit it without per-task pickling
    _set_shared(**shared)
    if cfg.workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, tasks))


def _load_task(task):
    idx, image_id, image_path, mask_path = task
    try:
        image = load_image(image_path)
        residual = prnu.noise_residual(image)
    except (IOError, OSError, ValueError) as exc:
        return idx, image_id, None, None, str(exc)
    return idx, image_id, image, residual, None


def _detect_task(task):
    idx, image_id, image, residual = task
    cfg = _SHARED["cfg"]
    fps = _SHARED["fps"]
    model = _SHARED["model"]
    try:
        cid, best = (None, 0.0) if not fps else _associate(image, residual,
                                                           fps, cfg)
        field = None
        pmask = None
        if cid is not None:
            fp = next(f for f in fps if f.id == cid)
            pmask, field = _detect_prnu(image, residual, fp, cfg)
        cmask = _detect_copymove(image, field, cfg)
        smask = _detect_splicing(image, model, cfg)
        # an empty sensor-pattern map localizes nothing, so hand fusion
        # "no map" rather than letting it suppress the other evidence
        pfuse = None if pmask is None or pmask.is_empty() else pmask
        fused = fusion.fuse_masks(
            fusion.FusionInput(splicing_mask=smask, copymove_mask=cmask,
                               prnu_mask=pfuse, prnu_pce=best),
            cfg.fusion_pce)
    except Exception as exc:  # per-image isolation: record, keep going
        return idx, image_id, None, str(exc)
    masks = {"prnu": pmask, "copymove": cmask, "splicing": smask,
             "fused": fused}
    return idx, image_id, (cid, best, masks), None


# --- reports ---

def _score_masks(masks: dict, truth: TamperMask) -> dict:
    scores = {}
    for name in DETECTORS:
        mask = masks.get(name)
        bits = np.zeros(truth.shape, dtype=bool) if mask is None else mask.bits
        scores[name] = mask_scores(bits, truth)[2]
    return scores


def write_report(path, entries, fp_rate=None) -> None:
    """Evaluation CSV: one row per image, one mean row per detector, and a
    false-positive-rate row when the corpus contains pristine images.

    `entries` is a list of (image_id, {detector: f}) in output order.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id"] + ["%s_f" % d for d in DETECTORS])
        for image_id, scores in entries:
            writer.writerow([image_id]
                            + ["%.6f" % scores[d] for d in DETECTORS])
        for det in DETECTORS:
            vals = [scores[det] for _, scores in entries]
            writer.writerow(["mean_%s" % det,
                             "%.6f" % (float(np.mean(vals)) if vals else 0.0)])
        if fp_rate is not None:
            writer.writerow(["false_positive_rate", "%.6f" % fp_rate])


def read_report(path) -> tuple[list, dict, float | None]:
    """Inverse of write_report: per-image rows, means, fp rate (or None)."""
    entries, means, fp_rate = [], {}, None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            if not row:
                continue
            if row[0] == "false_positive_rate":
                fp_rate = float(row[1])
            elif row[0].startswith("mean_"):
                means[row[0][5:]] = float(row[1])
            else:
                entries.append((row[0], {d: float(v) for d, v in
                                         zip(header[1:], row[1:])}))
    return entries, means, fp_rate


# --- pipeline ---

def run_pipeline(cfg: PipelineConfig, manifest, out_dir, model_path=None) -> dict:
    """Cluster, fingerprint, detect, fuse and evaluate one corpus.

    Writes everything under out_dir: clusters.txt, fingerprints/,
    model.bin, association.csv, masks/, report.csv (when the manifest has
    truth masks) and errors.csv.  Returns a summary dict with the mean
    F-measures and error count.
    """
    rows = _load_rows(manifest)
    out_dir = Path(out_dir)
    (out_dir / "fingerprints").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    errors = []

    tasks = [(i, _image_id(row), row["image"], row.get("mask"))
             for i, row in enumerate(rows)]
    loaded = _pmap(_load_task, tasks, cfg, {})
    good = []
    for (idx, image_id, image, residual, err), row in zip(loaded, rows):
        if err is not None:
            errors.append((image_id, "load", err))
        else:
            good.append((idx, image_id, image, residual, row))
    if not good:
        _write_errors(out_dir / "errors.csv", errors)
        raise DataError("no readable images in %s" % manifest)

    # cluster on every readable image, as the reference pipeline does with
    # its mixed training set; forged members mostly carry their host
    # camera's pattern, so they cluster with it
    clusters = prnu.cluster_residuals(
        [g[3] for g in good], [g[2] for g in good],
        pce_threshold=cfg.clustering_pce,
        min_cluster_size=cfg.min_cluster_size, seed=cfg.seed,
        exclusion_radius=cfg.exclusion_radius)
    cluster_rows = _cluster_manifest_rows(clusters, good, cfg)
    prnu.write_cluster_manifest(out_dir / "clusters.txt", cluster_rows)
    for fp in clusters.clusters:
        prnu.save_fingerprint(fp, out_dir / "fingerprints" / ("fp_%03d.bin" % fp.id))

    if model_path is not None:
        model = splicing.load_model(model_path)
    else:
        have_truth = any(row.get("mask") for _, _, _, _, row in good)
        model = None
        if not have_truth:
            sys.stderr.write("no truth masks in manifest; "
                             "splicing detector disabled\n")
        else:
            try:
                model = _train_splicing([g[4] for g in good], cfg)
            except DataError as exc:
                sys.stderr.write("splicing training failed (%s); "
                                 "detector disabled\n" % exc)
            else:
                splicing.save_model(model, out_dir / "model.bin")

    _set_shared(cfg=cfg, fps=clusters.clusters, model=model)
    results = _pmap(_detect_task, [(i, iid, img, res)
                                   for i, iid, img, res, _ in good],
                    cfg, {"cfg": cfg, "fps": clusters.clusters, "model": model})

    assoc_rows = []
    entries = []
    truth_empty_fired = []
    for (idx, image_id, payload, err), (_, _, image, _, row) in zip(results, good):
        if err is not None:
            errors.append((image_id, "detect", err))
            continue
        cid, best, masks = payload
        assoc_rows.append((image_id, cid, best))
        for name in DETECTORS:
            mask = masks[name]
            if mask is not None:
                save_mask(mask, out_dir / "masks" / ("%s_%s.png" % (image_id, name)))
        if row.get("mask"):
            truth = load_mask(row["mask"])
            entries.append((image_id, _score_masks(masks, truth)))
            if not truth.bits.any():
                truth_empty_fired.append(0 if masks["fused"].is_empty() else 1)

    assoc_rows.sort(key=lambda r: r[0])
    entries.sort(key=lambda e: e[0])
    errors.sort(key=lambda e: (e[0], e[1]))
    prnu.write_cluster_manifest(out_dir / "association.csv", assoc_rows)
    fp_rate = (float(np.mean(truth_empty_fired))
               if truth_empty_fired else None)
    summary = {"errors": len(errors), "images": len(rows)}
    if entries:
        write_report(out_dir / "report.csv", entries, fp_rate)
        for det in DETECTORS:
            summary["mean_%s" % det] = float(np.mean([s[det] for _, s in entries]))
    _write_errors(out_dir / "errors.csv", errors)
    return summary


def _cluster_manifest_rows(clusters, good, cfg: PipelineConfig):
    """Membership rows: each member scored against its own cluster's
    fingerprint, leftovers against their best cluster."""
    rows = []
    by_pos = {pos: (image_id, image, residual)
              for pos, (_, image_id, image, residual, _) in enumerate(good)}
    for fp, member_ids in zip(clusters.clusters, clusters.members):
        for pos in member_ids:
            image_id, image, residual = by_pos[pos]
            z = Plane(fp.estimate().data * image.luminance().data)
            rows.append((image_id, fp.id,
                         prnu.pce(residual, z, cfg.exclusion_radius)))
    for pos in clusters.leftovers:
        image_id, image, residual = by_pos[pos]
        best = -np.inf
        for fp in clusters.clusters:
            z = Plane(fp.estimate().data * image.luminance().data)
            best = max(best, prnu.pce(residual, z, cfg.exclusion_radius))
        rows.append((image_id, None, best if np.isfinite(best) else 0.0))
    rows.sort(key=lambda r: r[0])
    return rows


def _write_errors(path, errors) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "stage", "error"])
        for image_id, stage, message in errors:
            writer.writerow([image_id, stage, message])


# --- subcommands ---

def _cmd_synth_corpus(args, cfg: PipelineConfig) -> int:
    mix = tuple(float(v) for v in args.mix.split(","))
    if len(mix) != 4:
        raise UsageError("--mix expects four comma-separated fractions")
    manifest = synth.emit_corpus(args.out_dir, n_images=args.images,
                                 shape=(args.size, args.size),
                                 n_cameras=args.cameras, seed=cfg.seed,
                                 mix=mix)
    print(manifest)
    return EXIT_OK


def _iter_images(rows):
    for row in rows:
        image_id = _image_id(row)
        try:
            image = load_image(row["image"])
        except IOError as exc:
            sys.stderr.write("skipping %s: %s\n" % (image_id, exc))
            continue
        yield row, image_id, image


def _cmd_cluster(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    ids, images, residuals = [], [], []
    for row, image_id, image in _iter_images(rows):
        ids.append(image_id)
        images.append(image)
        residuals.append(prnu.noise_residual(image))
    if not images:
        raise DataError("no readable images in %s" % args.manifest)
    clusters = prnu.cluster_residuals(residuals, images,
                                      pce_threshold=cfg.clustering_pce,
                                      min_cluster_size=cfg.min_cluster_size,
                                      seed=cfg.seed,
                                      exclusion_radius=cfg.exclusion_radius)
    good = [(i, ids[i], images[i], residuals[i], None) for i in range(len(ids))]
    prnu.write_cluster_manifest(args.out,
                                _cluster_manifest_rows(clusters, good, cfg))
    print("%d clusters, %d leftovers" % (len(clusters.clusters),
                                         len(clusters.leftovers)))
    return EXIT_OK


def _cmd_fingerprint(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    by_id = {_image_id(row): row for row in rows}
    membership: dict[int, list[str]] = {}
    for image_id, cid, _ in prnu.read_cluster_manifest(args.clusters):
        if cid is not None:
            membership.setdefault(cid, []).append(image_id)
    if not membership:
        raise DataError("cluster manifest %s has no cluster members" % args.clusters)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for cid in sorted(membership):
        members = []
        for image_id in membership[cid]:
            if image_id not in by_id:
                raise DataError("cluster member %s missing from manifest" % image_id)
            image = load_image(by_id[image_id]["image"])
            members.append((image, prnu.noise_residual(image)))
        fp = prnu.estimate_fingerprint(members, fp_id=cid)
        prnu.save_fingerprint(fp, out_dir / ("fp_%03d.bin" % cid))
    print("%d fingerprints written to %s" % (len(membership), out_dir))
    return EXIT_OK


def _cmd_associate(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    fps = _load_fingerprints(args.fingerprints)
    out_rows = []
    for row, image_id, image in _iter_images(rows):
        residual = prnu.noise_residual(image)
        cid, best = _associate(image, residual, fps, cfg)
        out_rows.append((image_id, cid, best))
    prnu.write_cluster_manifest(args.out, out_rows)
    hit = sum(1 for _, cid, _ in out_rows if cid is not None)
    print("%d of %d images associated" % (hit, len(out_rows)))
    return EXIT_OK


def _cmd_detect_prnu(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    fps = _load_fingerprints(args.fingerprints)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assoc = []
    for row, image_id, image in _iter_images(rows):
        residual = prnu.noise_residual(image)
        cid, best = _associate(image, residual, fps, cfg)
        assoc.append((image_id, cid, best))
        if cid is None:
            continue
        fp = next(f for f in fps if f.id == cid)
        mask, _ = _detect_prnu(image, residual, fp, cfg)
        save_mask(mask, out_dir / ("%s_prnu.png" % image_id))
    prnu.write_cluster_manifest(out_dir / "association.csv", assoc)
    return EXIT_OK


def _cmd_detect_copymove(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    fps = _load_fingerprints(args.fingerprints) if args.fingerprints else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for row, image_id, image in _iter_images(rows):
        field = None
        if fps is not None:
            residual = prnu.noise_residual(image)
            cid, _ = _associate(image, residual, fps, cfg)
            if cid is not None:
                fp = next(f for f in fps if f.id == cid)
                field = prnu.correlation_field(image, residual, fp, cfg.window,
                                               cfg.exclusion_radius)
        mask = _detect_copymove(image, field, cfg)
        save_mask(mask, out_dir / ("%s_copymove.png" % image_id))
    return EXIT_OK


def _cmd_train_splicing(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    model = _train_splicing(rows, cfg)
    splicing.save_model(model, args.out)
    print("model written to %s" % args.out)
    return EXIT_OK


def _cmd_detect_splicing(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    model = splicing.load_model(args.model)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for row, image_id, image in _iter_images(rows):
        mask = _detect_splicing(image, model, cfg)
        save_mask(mask, out_dir / ("%s_splicing.png" % image_id))
    return EXIT_OK


def _read_optional_mask(path, source):
    return load_mask(path, source) if Path(path).exists() else None


def _cmd_fuse(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    mask_dir = Path(args.masks)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pces = {}
    if args.association:
        for image_id, cid, best in prnu.read_cluster_manifest(args.association):
            if cid is not None:
                pces[image_id] = best
    for row in rows:
        image_id = _image_id(row)
        spath = mask_dir / ("%s_splicing.png" % image_id)
        if not spath.exists():
            raise DataError("missing splicing mask %s" % spath)
        smask = load_mask(spath, MaskSource.SPLICING)
        cmask = _read_optional_mask(mask_dir / ("%s_copymove.png" % image_id),
                                    MaskSource.COPYMOVE)
        pmask = _read_optional_mask(mask_dir / ("%s_prnu.png" % image_id),
                                    MaskSource.PRNU)
        if pmask is not None and pmask.is_empty():
            pmask = None
        fused = fusion.fuse_masks(
            fusion.FusionInput(splicing_mask=smask, copymove_mask=cmask,
                               prnu_mask=pmask, prnu_pce=pces.get(image_id)),
            cfg.fusion_pce)
        save_mask(fused, out_dir / ("%s_fused.png" % image_id))
    return EXIT_OK


def _cmd_evaluate(args, cfg: PipelineConfig) -> int:
    rows = _load_rows(args.manifest)
    mask_dir = Path(args.masks)
    entries = []
    truth_empty_fired = []
    for row in rows:
        if not row.get("mask"):
            continue
        image_id = _image_id(row)
        truth = load_mask(row["mask"])
        masks = {}
        for det in DETECTORS:
            masks[det] = _read_optional_mask(
                mask_dir / ("%s_%s.png" % (image_id, det)), MaskSource.TRUTH)
        entries.append((image_id, _score_masks(masks, truth)))
        if not truth.bits.any():
            fused = masks.get("fused")
            truth_empty_fired.append(0 if fused is None or fused.is_empty()
                                     else 1)
    if not entries:
        raise DataError("manifest has no truth masks to evaluate against")
    fp_rate = float(np.mean(truth_empty_fired)) if truth_empty_fired else None
    write_report(args.out, entries, fp_rate)
    for det in DETECTORS:
        print("mean_%s %.4f" % (det, np.mean([s[det] for _, s in entries])))
    return EXIT_OK


def _cmd_run(args, cfg: PipelineConfig) -> int:
    summary = run_pipeline(cfg, args.manifest, args.out_dir,
                           model_path=args.model)
    for key in sorted(summary):
        print("%s %s" % (key, summary[key]))
    return EXIT_OK


# --- argument parsing ---

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="forgeloc",
                     description="image forgery localization pipeline")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth-corpus", help="generate a synthetic test corpus")
    p.add_argument("out_dir")
    p.add_argument("--images", type=int, default=60)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--mix", default="0.30,0.30,0.20,0.20",
                   help="copy-move,splice,inpaint,pristine fractions")
    p.set_defaults(func=_cmd_synth_corpus)

    p = sub.add_parser("cluster", help="group images by camera")
    p.add_argument("manifest")
    p.add_argument("out")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("fingerprint", help="estimate per-cluster fingerprints")
    p.add_argument("manifest")
    p.add_argument("clusters")
    p.add_argument("out_dir")
    p.set_defaults(func=_cmd_fingerprint)

    p = sub.add_parser("associate", help="match images against fingerprints")
    p.add_argument("manifest")
    p.add_argument("fingerprints")
    p.add_argument("out")
    p.set_defaults(func=_cmd_associate)

    p = sub.add_parser("detect-prnu", help="sensor-pattern localization")
    p.add_argument("manifest")
    p.add_argument("fingerprints")
    p.add_argument("out_dir")
    p.set_defaults(func=_cmd_detect_prnu)

    p = sub.add_parser("detect-copymove", help="dense duplicate-region search")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--fingerprints",
                   help="fingerprint dir enabling source disambiguation")
    p.set_defaults(func=_cmd_detect_copymove)

    p = sub.add_parser("train-splicing", help="train the residual classifier")
    p.add_argument("manifest")
    p.add_argument("out")
    p.set_defaults(func=_cmd_train_splicing)

    p = sub.add_parser("detect-splicing", help="residual-statistics localization")
    p.add_argument("manifest")
    p.add_argument("model")
    p.add_argument("out_dir")
    p.set_defaults(func=_cmd_detect_splicing)

    p = sub.add_parser("fuse", help="combine per-detector masks")
    p.add_argument("manifest")
    p.add_argument("masks")
    p.add_argument("out_dir")
    p.add_argument("--association", help="association csv for PCE values")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("evaluate", help="score masks against truth")
    p.add_argument("manifest")
    p.add_argument("masks")
    p.add_argument("out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline over one manifest")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--model", help="reuse a trained splicing model")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = build_config(args.config, args.set)
        if args.print_config:
            print_config(cfg)
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args, cfg)
    except UsageError as exc:
        sys.stderr.write("usage error: %s\n" % exc)
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write("data error: %s\n" % exc)
        return EXIT_DATA
    except IOError as exc:
        sys.stderr.write("data error: %s\n" % exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
