"""Multiresolution slide access.

Slides are stored as a directory of levels so the pipeline never depends on a
proprietary scanner format:

    slide_dir/
      slide.json            {"slide_id", "width", "height", "tile_size"}
      level_0/tile_r0000_c0000.png ...
      level_1/...
      level_2/...

Level s is downsampled x4 per step (scale 0, 1, 2 at x1, x4, x16); level
dimensions are floor(dim / 4**s). Tiles are PNG, row/col indexed, edge tiles
cropped to the level bounds; a missing tile inside bounds reads as background
white (sparse storage). Any other reader can be plugged in by implementing
the SlideSource protocol.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

DOWNSAMPLE_PER_SCALE = 4
SUPPORTED_SCALES = (0, 1, 2)
BACKGROUND_RGB = 255


class SlideRangeError(ValueError):
    """Requested region falls outside the slide at scale 0."""


class ScaleConfigError(ValueError):
    """Requested pyramid scale is not one of the supported scales."""


def check_scale(scale: int) -> int:
    if scale not in SUPPORTED_SCALES:
        raise ScaleConfigError(f"scale must be one of {SUPPORTED_SCALES}, got {scale}")
    return int(scale)


def scale_factor(scale: int) -> int:
    return DOWNSAMPLE_PER_SCALE ** check_scale(scale)


@runtime_checkable
class SlideSource(Protocol):
    """Adapter interface for slide readers."""

    slide_id: str

    def dimensions(self) -> tuple[int, int]:
        """(width, height) at scale 0."""
        ...

    def read_region(self, x: int, y: int, w: int, h: int, scale: int) -> np.ndarray:
        """RGB uint8 raster of shape (h//4**scale, w//4**scale, 3).

        The rectangle (x, y, w, h) is given at scale 0 and must lie within
        the slide bounds.
        """
        ...


def _check_bounds(slide: SlideSource, x: int, y: int, w: int, h: int) -> None:
    sw, sh = slide.dimensions()
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > sw or y + h > sh:
        raise SlideRangeError(
            f"region ({x},{y},{w},{h}) outside slide {slide.slide_id} of size {sw}x{sh}"
        )


def downsample_box(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-average downsampling; trims trailing rows/cols to a multiple of factor."""
    if factor == 1:
        return img
    h = (img.shape[0] // factor) * factor
    w = (img.shape[1] // factor) * factor
    cropped = img[:h, :w].astype(np.float64)
    blocks = cropped.reshape(h // factor, factor, w // factor, factor, -1)
    out = blocks.mean(axis=(1, 3))
    return np.rint(out).astype(np.uint8)


class ArraySlide:
    """In-memory slide over a scale-0 RGB array; lower scales are box means."""

    def __init__(self, slide_id: str, pixels: np.ndarray):
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ValueError("ArraySlide expects an (H, W, 3) uint8 array")
        self.slide_id = slide_id
        self.pixels = pixels

    def dimensions(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]

    def read_region(self, x, y, w, h, scale):
        f = scale_factor(scale)
        _check_bounds(self, x, y, w, h)
        crop = self.pixels[y : y + h, x : x + w]
        return downsample_box(crop, f)


class DirectorySlide:
    """Reader for the directory-of-levels convention documented above."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta_path = self.root / "slide.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"not a slide directory (no slide.json): {self.root}")
        meta = json.loads(meta_path.read_text())
        self.slide_id = meta["slide_id"]
        self.width = int(meta["width"])
        self.height = int(meta["height"])
        self.tile_size = int(meta["tile_size"])

    def dimensions(self) -> tuple[int, int]:
        return self.width, self.height

    def level_dimensions(self, scale: int) -> tuple[int, int]:
        f = scale_factor(scale)
        return self.width // f, self.height // f

    def _tile_path(self, scale: int, row: int, col: int) -> Path:
        return self.root / f"level_{scale}" / f"tile_r{row:04d}_c{col:04d}.png"

    def read_region(self, x, y, w, h, scale):
        f = scale_factor(scale)
        _check_bounds(self, x, y, w, h)
        lx, ly = x // f, y // f
        lw, lh = w // f, h // f
        out = np.full((lh, lw, 3), BACKGROUND_RGB, dtype=np.uint8)
        if lw == 0 or lh == 0:
            return out
        ts = self.tile_size
        for row in range(ly // ts, (ly + lh - 1) // ts + 1):
            for col in range(lx // ts, (lx + lw - 1) // ts + 1):
                path = self._tile_path(scale, row, col)
                if not path.exists():
                    continue  # sparse slide: missing tile is background
                tile = np.asarray(Image.open(path).convert("RGB"))
                tx0, ty0 = col * ts, row * ts
                sx0 = max(lx, tx0)
                sy0 = max(ly, ty0)
                sx1 = min(lx + lw, tx0 + tile.shape[1])
                sy1 = min(ly + lh, ty0 + tile.shape[0])
                if sx1 <= sx0 or sy1 <= sy0:
                    continue
                out[sy0 - ly : sy1 - ly, sx0 - lx : sx1 - lx] = tile[
                    sy0 - ty0 : sy1 - ty0, sx0 - tx0 : sx1 - tx0
                ]
        return out


def write_directory_slide(
    root: str | Path, slide_id: str, pixels: np.ndarray, tile_size: int = 2048
) -> Path:
    """Render a scale-0 array into the directory-of-levels layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape[:2]
    (root / "slide.json").write_text(
        json.dumps(
            {"slide_id": slide_id, "width": w, "height": h, "tile_size": tile_size},
            sort_keys=True,
        )
    )
    for scale in SUPPORTED_SCALES:
        level = downsample_box(pixels, scale_factor(scale))
        level_dir = root / f"level_{scale}"
        level_dir.mkdir(exist_ok=True)
        for row in range(0, (level.shape[0] + tile_size - 1) // tile_size):
            for col in range(0, (level.shape[1] + tile_size - 1) // tile_size):
                tile = level[
                    row * tile_size : (row + 1) * tile_size,
                    col * tile_size : (col + 1) * tile_size,
                ]
                Image.fromarray(tile).save(
                    level_dir / f"tile_r{row:04d}_c{col:04d}.png", format="PNG"
                )
    return root
