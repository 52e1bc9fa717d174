"""Non-overlapping 256x256 tiling of oriented regions and microscopy images.

Windows slide with stride 256; a window survives when at most 20% of its
area is background (mask coverage >= 0.8, ties retained). Retained patches
are numbered consecutively in the chosen scan order: RASTER scans every row
left to right, SERPENTINE alternates direction per row.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import Label
from .regions import TILE, OrientedRegion

MICROSCOPY_SIZE = (2048, 1536)  # width x height
PATCH_AREA = TILE * TILE


class ScanOrder(enum.Enum):
    RASTER = "raster"
    SERPENTINE = "serpentine"


class EmptyRegionError(ValueError):
    """Region smaller than one tile in some dimension."""


class DimensionError(ValueError):
    """Input raster does not have the dimensions the operation requires."""


@dataclass
class Patch:
    seq_index: int
    grid_pos: tuple[int, int]  # (row, col)
    pixels: np.ndarray  # (256, 256, 3) uint8
    mask_coverage: float

    def __post_init__(self):
        if self.pixels.shape[:2] != (TILE, TILE):
            raise DimensionError(f"patch pixels must be {TILE}x{TILE}, got {self.pixels.shape[:2]}")


@dataclass
class PatchSet:
    region_id: str
    label: Label
    scale: int
    patches: list[Patch]
    order: ScanOrder = ScanOrder.RASTER

    @property
    def n_patches(self) -> int:
        return len(self.patches)


def grid_positions(n_rows: int, n_cols: int, order: ScanOrder) -> list[tuple[int, int]]:
    """Window (row, col) positions in scan order."""
    positions = []
    for r in range(n_rows):
        cols = range(n_cols)
        if order is ScanOrder.SERPENTINE and r % 2 == 1:
            cols = range(n_cols - 1, -1, -1)
        positions.extend((r, c) for c in cols)
    return positions


def tile_region(
    region: OrientedRegion,
    order: ScanOrder = ScanOrder.RASTER,
    max_background: float = 0.2,
) -> PatchSet:
    """Cut a 256-aligned region into its retained, ordered patch set.

    Every (H/256)x(W/256) window is a candidate; windows with strictly more
    than `max_background` of their area outside the mask are discarded.
    """
    h, w = region.image.shape[:2]
    if h < TILE or w < TILE:
        raise EmptyRegionError(f"region {region.region_id} is {w}x{h}; needs at least {TILE}x{TILE}")
    if h % TILE or w % TILE:
        raise DimensionError(
            f"region {region.region_id} is {w}x{h}; dimensions must be multiples of {TILE}"
        )
    n_rows, n_cols = h // TILE, w // TILE
    min_coverage = 1.0 - max_background

    patches = []
    for row, col in grid_positions(n_rows, n_cols, order):
        window = np.s_[row * TILE : (row + 1) * TILE, col * TILE : (col + 1) * TILE]
        coverage = float(region.mask[window].sum()) / PATCH_AREA
        if coverage < min_coverage:
            continue
        patches.append(
            Patch(
                seq_index=len(patches),
                grid_pos=(row, col),
                pixels=np.ascontiguousarray(region.image[window]),
                mask_coverage=coverage,
            )
        )
    return PatchSet(
        region_id=region.region_id,
        label=region.label,
        scale=region.scale,
        patches=patches,
        order=order,
    )


def tile_microscopy(
    image: np.ndarray, image_id: str, label: Label, order: ScanOrder = ScanOrder.RASTER
) -> PatchSet:
    """Tile a 2048x1536 microscopy image into its fixed 8x6 grid of 48 patches.

    No background filtering; every window is retained.
    """
    h, w = image.shape[:2]
    if (w, h) != MICROSCOPY_SIZE:
        raise DimensionError(
            f"{image_id}: expected microscopy image of "
            f"{MICROSCOPY_SIZE[0]}x{MICROSCOPY_SIZE[1]}, got {w}x{h}"
        )
    patches = []
    for row, col in grid_positions(h // TILE, w // TILE, order):
        window = np.s_[row * TILE : (row + 1) * TILE, col * TILE : (col + 1) * TILE]
        patches.append(
            Patch(
                seq_index=len(patches),
                grid_pos=(row, col),
                pixels=np.ascontiguousarray(image[window]),
                mask_coverage=1.0,
            )
        )
    return PatchSet(region_id=image_id, label=label, scale=0, patches=patches, order=order)


MANIFEST_NAME = "sets.csv"
MANIFEST_HEADER = ["region_id", "label", "scale", "n_patches", "order"]


def patch_filename(region_id: str, seq_index: int) -> str:
    return f"{region_id}_{seq_index:05d}.png"


def emit_patches(patch_set: PatchSet, out_dir: str | Path) -> dict:
    """Write one lossless PNG per patch plus the set's manifest line.

    Returns the manifest record. On a write failure the files already written
    for this set are removed before the error propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for patch in patch_set.patches:
            path = out_dir / patch_filename(patch_set.region_id, patch.seq_index)
            Image.fromarray(patch.pixels).save(path, format="PNG")
            written.append(path)
    except OSError:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    record = {
        "region_id": patch_set.region_id,
        "label": patch_set.label.display,
        "scale": str(patch_set.scale),
        "n_patches": str(patch_set.n_patches),
        "order": patch_set.order.value,
    }
    manifest = out_dir / MANIFEST_NAME
    rows: list[dict] = []
    if manifest.exists():
        with open(manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
    # upsert in place so re-emitting the same sets leaves the manifest
    # byte-identical regardless of how often it runs
    slot = next((i for i, r in enumerate(rows) if r["region_id"] == patch_set.region_id), None)
    if slot is None:
        rows.append(record)
    elif rows[slot] != record:
        rows[slot] = record
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    return record


def read_manifest(patch_dir: str | Path) -> list[dict]:
    with open(Path(patch_dir) / MANIFEST_NAME, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["scale"] = int(row["scale"])
        row["n_patches"] = int(row["n_patches"])
    return rows


def load_patch_pixels(patch_dir: str | Path, region_id: str, n_patches: int) -> list[np.ndarray]:
    return [
        np.asarray(Image.open(Path(patch_dir) / patch_filename(region_id, i)).convert("RGB"))
        for i in range(n_patches)
    ]
