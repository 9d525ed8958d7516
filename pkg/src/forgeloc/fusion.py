"""Combine the three detector masks into one verdict.

The detectors are trusted in a fixed reliability order.  A verified copy
move is near-certain evidence, so its mask wins outright and other maps
are only merged into it when they are themselves extremely reliable.
The sensor-pattern map comes next, and the residual-statistics map is
the fallback that is always available.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import MaskSource, TamperMask

__all__ = ["FusionInput", "fuse_masks", "PCE_OVERRIDE"]

# sensor-pattern evidence is merged into a copy-move verdict only above this
PCE_OVERRIDE = 1200.0


@dataclass(frozen=True)
class FusionInput:
    """Per-image detector outputs.

    Either of the first two masks may be absent (detector not run, or no
    camera could be associated); the splicing mask never is.  prnu_pce is
    the reliability score of the sensor-pattern association and may be
    present even when prnu_mask is not.
    """

    splicing_mask: TamperMask
    copymove_mask: TamperMask | None = None
    prnu_mask: TamperMask | None = None
    prnu_pce: float | None = None

    def __post_init__(self):
        dims = self.splicing_mask.shape
        for mask in (self.copymove_mask, self.prnu_mask):
            if mask is not None and mask.shape != dims:
                raise ValueError("detector mask dimensions differ: %s vs %s"
                                 % (mask.shape, dims))

    @property
    def shape(self) -> tuple[int, int]:
        return self.splicing_mask.shape


def fuse_masks(inputs: FusionInput, pce_override: float = PCE_OVERRIDE) -> TamperMask:
    """Reliability-ordered fusion of the per-detector masks.

    A nonempty copy-move mask is used on its own, except that the
    sensor-pattern mask is OR-ed in when its PCE clears `pce_override`
    (raising the PCE across the boundary can only ever add pixels).
    Otherwise the sensor-pattern mask is used whenever the image was
    associated with a camera, and the splicing mask is the fallback.
    An empty copy-move mask carries no localization, so it falls through
    rather than suppressing the other evidence.
    """
    cm = inputs.copymove_mask
    if cm is not None and not cm.is_empty():
        bits = cm.bits
        if (inputs.prnu_mask is not None and inputs.prnu_pce is not None
                and inputs.prnu_pce > pce_override):
            bits = bits | inputs.prnu_mask.bits
        return TamperMask(bits.copy(), MaskSource.FUSED)
    if inputs.prnu_mask is not None:
        return TamperMask(inputs.prnu_mask.bits.copy(), MaskSource.FUSED)
    return TamperMask(inputs.splicing_mask.bits.copy(), MaskSource.FUSED)
