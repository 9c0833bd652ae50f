"""Clothing-agnostic person representation and occlusion-aware clothes masking.

Pure mask algebra on numpy arrays: the segmentation / body-surface / pose /
matting maps are inputs produced elsewhere.  The agnostic mask is the dilated
union of the arm, clothes and torso-skin parse labels, minus hands and minus
the occlusion region (matte foreground that the parser left at label zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry
from .numcore import ShapeError, Tensor


class ConfigError(ValueError):
    """A label table or configuration value is invalid."""


# Parse labels follow an external parser's scheme; the table is configuration.
DEFAULT_LABEL_TABLE = {
    "clothes": [5, 6, 7],
    "arms": [14, 15],
    "torso_skin": [10],
    "hands": [3],  # body-surface (dense) label, not a parse label
}

REQUIRED_ROLES = ("clothes", "arms", "torso_skin", "hands")

DEFAULT_FILL_VALUE = 0.5
DEFAULT_DILATION_RADIUS = 5  # px at 192x256; scale proportionally otherwise


def load_label_table(path) -> dict:
    """Parse a ``role = 1,2,3`` text file into a label table."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad label-table line: {line!r}")
            key, _, val = line.partition("=")
            try:
                table[key.strip()] = [int(v) for v in val.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"non-integer label in line: {line!r}") from None
    validate_label_table(table)
    return table


def validate_label_table(table: dict):
    for role in REQUIRED_ROLES:
        if role not in table:
            raise ConfigError(f"label table missing role: {role}")
        labels = table[role]
        if not all(isinstance(v, int) and v >= 0 for v in labels):
            raise ConfigError(f"label table role {role} has invalid labels: {labels}")


@dataclass
class LabelMaps:
    """Per-frame parsing, body-surface, pose and matting maps."""

    seg: np.ndarray  # int H x W, 0 = background / other items
    dense: np.ndarray  # int H x W, includes a hands label
    pose: np.ndarray  # K x 2 keypoint coordinates
    matte: np.ndarray  # binary H x W foreground

    def __post_init__(self):
        self.seg = np.asarray(self.seg)
        self.dense = np.asarray(self.dense)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.matte = np.asarray(self.matte)
        if not (self.seg.shape == self.dense.shape == self.matte.shape):
            raise ShapeError(
                f"seg {self.seg.shape}, dense {self.dense.shape} and "
                f"matte {self.matte.shape} must share spatial size"
            )


@dataclass
class AgnosticResult:
    agnostic_img: np.ndarray  # H x W x 3
    agnostic_mask: np.ndarray  # binary H x W
    occlusion_mask: np.ndarray  # binary H x W


def occlusion_region(maps: LabelMaps) -> np.ndarray:
    """Matte foreground that the parser labelled zero (bags, hair, ...)."""
    return (maps.matte > 0) & (maps.seg == 0)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def _label_mask(arr: np.ndarray, labels) -> np.ndarray:
    return np.isin(arr, np.asarray(labels, dtype=arr.dtype))


def compose_agnostic(
    frame: np.ndarray,
    maps: LabelMaps,
    dilation_radius: int = DEFAULT_DILATION_RADIUS,
    fill_value: float = DEFAULT_FILL_VALUE,
    label_table: dict | None = None,
) -> AgnosticResult:
    """Mask out the clothing-related region of a frame, keeping hands and
    occluders visible.  The set difference runs last, so hands and occlusion
    pixels can never end up inside the agnostic mask.
    """
    table = DEFAULT_LABEL_TABLE if label_table is None else label_table
    validate_label_table(table)
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[:2] != maps.seg.shape:
        raise ShapeError(
            f"frame {frame.shape} does not match maps {maps.seg.shape}"
        )

    clothing = (
        _label_mask(maps.seg, table["clothes"])
        | _label_mask(maps.seg, table["arms"])
        | _label_mask(maps.seg, table["torso_skin"])
    )
    if dilation_radius > 0 and clothing.any():
        clothing = ndimage.binary_dilation(clothing, structure=_disk(dilation_radius))
    hands = _label_mask(maps.dense, table["hands"])
    occl = occlusion_region(maps)
    m_a = clothing & ~hands & ~occl

    agnostic = frame.copy()
    agnostic[m_a] = fill_value
    return AgnosticResult(agnostic, m_a, occl)


def mask_occluded_clothes(
    clothes: np.ndarray,
    tps: geometry.TpsParams,
    occlusion: np.ndarray,
    clothes_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Zero the source-clothes pixels whose TPS image lands in the occluded
    region of the warped clothes.  Pixels outside the clothes support are
    never modified.
    """
    clothes = np.asarray(clothes, dtype=np.float64)
    occlusion = np.asarray(occlusion)
    if clothes.shape[:2] != occlusion.shape:
        raise ShapeError(
            f"clothes {clothes.shape} does not match occlusion {occlusion.shape}"
        )
    h, w = occlusion.shape
    if clothes_mask is None:
        clothes_mask = np.any(clothes != 0, axis=-1)
    else:
        clothes_mask = np.asarray(clothes_mask) > 0

    flow = geometry.tps_apply(tps, h, w)
    support = geometry.warp_by_flow(
        Tensor(clothes_mask.astype(np.float64)), flow
    ).data > 0
    region = occlusion.astype(bool) & support
    src = geometry.tps_reverse_map(tps, region) & clothes_mask

    out = clothes.copy()
    out[src] = 0.0
    return out
