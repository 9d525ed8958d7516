"""Image forgery localization toolkit.

Three detectors (sensor-noise correlation, dense copy-move matching,
residual-statistics splicing classification) plus mask fusion, a
synthetic ground-truth generator and a batch CLI.
"""

from .imgcore import (
    LUMA_WEIGHTS,
    MaskSource,
    Plane,
    RgbImage,
    TamperMask,
    f_measure,
    load_image,
    load_mask,
    luminance,
    mask_scores,
    morph_clean,
    save_image,
    save_mask,
    windowed_pearson,
)
from .prnu import (
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
    pce,
    prnu_mask,
    save_fingerprint,
)
from .copymove import (
    CopyRegionPair,
    OffsetField,
    TransformSpec,
    compute_nnf,
    copymove_mask,
    disambiguate_source,
    extract_copy_regions,
    filter_offset_field,
    sweep_transforms,
)
from .splicing import (
    BlockLabel,
    FeatureVector,
    LinearModel,
    SdhMap,
    label_blocks,
    load_model,
    residual_features,
    save_model,
    sdh_map,
    splicing_mask,
    train_model,
    training_blocks,
)
from .fusion import FusionInput, fuse_masks
from .synth import (
    ForgeryKind,
    ForgerySpec,
    SyntheticCamera,
    emit_corpus,
    forge,
    make_camera,
    make_scene,
    shoot,
)

__version__ = "0.1.0"
