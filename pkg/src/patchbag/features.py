"""Per-patch descriptor sets, the portable .pbfv feature file, and a
handcrafted baseline extractor.

A descriptor set holds R descriptors of dimension d for each of n patches
(shape n x R x d, float32). CNN exporters write the same file format with
R=1 (pooled embedding) or R=cells (spatial grid); the baseline extractor
keeps the primary pipeline self-contained with R = grid^2 cell statistics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Cursor, FileFormatError, FormatErrorCode, pack_string, read_framed, write_framed
from .labels import Label

FEATURE_MAGIC = b"PBFV"
FEATURE_VERSION = 1

BASELINE_GRID = 4
BASELINE_DIM = 16
GRADIENT_BINS = 8


@dataclass
class DescriptorSet:
    region_id: str
    label: Label
    scale: int
    extractor_id: str
    descriptors: np.ndarray  # (n_patches, R, d) float32

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 3:
            raise FileFormatError(
                FormatErrorCode.BAD_SHAPE,
                f"descriptors must be (n_patches, R, d), got shape {self.descriptors.shape}",
            )

    @property
    def n_patches(self) -> int:
        return self.descriptors.shape[0]

    @property
    def r(self) -> int:
        return self.descriptors.shape[1]

    @property
    def d(self) -> int:
        return self.descriptors.shape[2]

    def pooled(self) -> np.ndarray:
        """(n_patches, R*d) flattened view (the feature length M = R*d)."""
        return self.descriptors.reshape(self.n_patches, -1)


def _cell_descriptor(cell: np.ndarray) -> np.ndarray:
    """16 statistics of one RGB cell, all scaled into [0, 1].

    Layout: RGB means (3), RGB standard deviations (3), 8-bin unsigned
    gradient-orientation histogram of the grayscale cell (L1-normalized,
    all-zero when the cell has no gradient), 10th and 90th grayscale
    percentiles.
    """
    rgb = cell.astype(np.float64)
    means = rgb.mean(axis=(0, 1)) / 255.0
    stds = rgb.std(axis=(0, 1)) / 255.0

    gray = rgb[:, :, 0] * 0.299 + rgb[:, :, 1] * 0.587 + rgb[:, :, 2] * 0.114
    gy, gx = np.gradient(gray)
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx) % np.pi  # unsigned, [0, pi)
    bins = np.minimum((orientation / (np.pi / GRADIENT_BINS)).astype(np.intp), GRADIENT_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=magnitude.ravel(), minlength=GRADIENT_BINS)
    total = hist.sum()
    if total > 0:
        hist = hist / total

    p10, p90 = np.percentile(gray, (10, 90)) / 255.0
    return np.concatenate([means, stds, hist, [p10, p90]]).astype(np.float32)


def extract_baseline(pixels: np.ndarray, grid: int = BASELINE_GRID) -> np.ndarray:
    """Cell-statistics descriptors for one patch: (grid^2, 16) float32.

    The patch is split into a grid x grid array of equal cells; every cell
    yields one descriptor computed only from its own pixels, so extracting a
    cell alone gives the same row as extracting the full patch.
    """
    h, w = pixels.shape[:2]
    if grid < 1 or h % grid or w % grid:
        raise ValueError(f"grid {grid} must divide patch dimensions {w}x{h}")
    ch, cw = h // grid, w // grid
    rows = []
    for r in range(grid):
        for c in range(grid):
            rows.append(_cell_descriptor(pixels[r * ch : (r + 1) * ch, c * cw : (c + 1) * cw]))
    return np.stack(rows)


def baseline_extractor_id(grid: int = BASELINE_GRID) -> str:
    return f"baseline/cells/{grid}x{grid}x{BASELINE_DIM}"


def extract_set_baseline(patch_pixels: list[np.ndarray], region_id: str, label: Label,
                         scale: int, grid: int = BASELINE_GRID) -> DescriptorSet:
    if not patch_pixels:
        descriptors = np.zeros((0, grid * grid, BASELINE_DIM), dtype=np.float32)
    else:
        descriptors = np.stack([extract_baseline(p, grid) for p in patch_pixels])
    return DescriptorSet(
        region_id=region_id,
        label=label,
        scale=scale,
        extractor_id=baseline_extractor_id(grid),
        descriptors=descriptors,
    )


def write_feature_file(dset: DescriptorSet, path: str | Path) -> None:
    """Serialize a descriptor set to the little-endian .pbfv layout.

    magic | version u16 | extractor_id | label u8 | scale u8 | region_id |
    n_patches u32 | R u32 | d u32 | n*R*d float32 (patch-major) | CRC32.
    """
    values = np.ascontiguousarray(dset.descriptors, dtype="<f4")
    if not np.isfinite(values).all():
        raise FileFormatError(
            FormatErrorCode.NON_FINITE, f"{dset.region_id}: descriptors contain NaN or inf"
        )
    payload = struct.pack("<H", FEATURE_VERSION)
    payload += pack_string(dset.extractor_id)
    payload += struct.pack("<BB", int(dset.label), dset.scale)
    payload += pack_string(dset.region_id)
    payload += struct.pack("<III", dset.n_patches, dset.r, dset.d)
    payload += values.tobytes()
    write_framed(path, FEATURE_MAGIC, payload)


def read_feature_file(path: str | Path) -> DescriptorSet:
    """Parse and validate a .pbfv file; every failure mode has its own code."""
    cur = Cursor(read_framed(path, FEATURE_MAGIC), context=str(path))
    version = cur.unpack("H")
    if version != FEATURE_VERSION:
        raise FileFormatError(
            FormatErrorCode.BAD_VERSION, f"{path}: version {version}, expected {FEATURE_VERSION}"
        )
    extractor_id = cur.take_string()
    label_code, scale = cur.unpack("BB")
    try:
        label = Label(label_code)
    except ValueError:
        raise FileFormatError(
            FormatErrorCode.BAD_SHAPE, f"{path}: label code {label_code} out of range"
        ) from None
    region_id = cur.take_string()
    n_patches, r, d = cur.unpack("III")
    if r == 0 or d == 0:
        raise FileFormatError(FormatErrorCode.BAD_SHAPE, f"{path}: R={r}, d={d} must be positive")
    raw = cur.take(n_patches * r * d * 4)
    cur.expect_end()
    values = np.frombuffer(raw, dtype="<f4").reshape(n_patches, r, d).copy()
    if not np.isfinite(values).all():
        raise FileFormatError(FormatErrorCode.NON_FINITE, f"{path}: non-finite descriptor values")
    return DescriptorSet(
        region_id=region_id,
        label=label,
        scale=scale,
        extractor_id=extractor_id,
        descriptors=values,
    )
