"""Region extraction: mask rasterization, principal-axis orientation, and
canonically oriented 256-aligned crops.

Coordinates are (x=column, y=row) with y increasing downward; pixel (r, c)
sits at coordinate (c, r). Orientation angles are measured from the X-axis in
this frame and live in (-90, 90]. A region is rotated about its mask centroid
by (90 - angle) so its major axis ends up vertical, then cropped to a tight
bounding box extended up to the next multiple of 256 per dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .annotations import PolygonAnnotation, points_in_polygon, rectangle_intersects_polygon
from .labels import Label
from .slides import SlideSource, check_scale, scale_factor

TILE = 256
DEFAULT_MAX_REGION_PIXELS = 2**30
BACKGROUND_FILL = 255


class DegenerateMaskError(ValueError):
    """Polygon produced no set pixels at the requested scale."""


class ZeroAxisError(ValueError):
    """Mask too small for a meaningful major axis (single pixel)."""


class OversizedRegionError(RuntimeError):
    """Region exceeds the configured pixel budget; callers log and skip."""

    def __init__(self, region_id: str, pixel_count: int, budget: int):
        super().__init__(
            f"region {region_id}: {pixel_count} pixels exceeds budget {budget}"
        )
        self.region_id = region_id
        self.pixel_count = pixel_count
        self.budget = budget


@dataclass
class RegionMask:
    origin: tuple[int, int]  # (x, y) of bitmap[0, 0] at the mask's scale
    width: int
    height: int
    bitmap: np.ndarray  # (height, width) bool

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if self.bitmap.shape != (self.height, self.width):
            raise ValueError(
                f"bitmap shape {self.bitmap.shape} != (height={self.height}, width={self.width})"
            )
        if not self.bitmap.any():
            raise DegenerateMaskError("mask has no set pixels")


@dataclass
class AxisSummary:
    centroid: tuple[float, float]  # (x, y)
    major_axis_length: float
    angle_deg: float  # (-90, 90] from the X-axis


@dataclass
class OrientedRegion:
    region_id: str
    label: Label
    scale: int
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    rotation_deg: float
    bbox: tuple[int, int, int, int]  # (x, y, w, h); w and h are multiples of 256

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} dimensions differ"
            )
        if self.bbox[2] % TILE or self.bbox[3] % TILE:
            raise ValueError(f"bbox {self.bbox} dimensions must be multiples of {TILE}")


@dataclass
class SkipRecord:
    region_id: str
    reason: str
    pixel_count: int


def rasterize_mask(annotation: PolygonAnnotation, scale: int) -> RegionMask:
    """Nonzero-winding fill of the polygon over its bounding box at `scale`.

    Vertex coordinates are divided by 4**scale first; a pixel is set when its
    center lies inside the scaled polygon.
    """
    f = scale_factor(scale)
    verts = annotation.vertices / f
    x0 = int(math.floor(verts[:, 0].min()))
    y0 = int(math.floor(verts[:, 1].min()))
    x1 = int(math.ceil(verts[:, 0].max()))
    y1 = int(math.ceil(verts[:, 1].max()))
    w, h = max(x1 - x0, 1), max(y1 - y0, 1)

    bitmap = np.zeros((h, w), dtype=bool)
    local = verts - np.array([x0, y0], dtype=np.float64)
    xs = np.arange(w) + 0.5
    chunk = max(1, 2**22 // max(w, 1))
    for r0 in range(0, h, chunk):
        r1 = min(r0 + chunk, h)
        gy, gx = np.meshgrid(np.arange(r0, r1) + 0.5, xs, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        bitmap[r0:r1] = points_in_polygon(pts, local).reshape(r1 - r0, w)
    if not bitmap.any():
        raise DegenerateMaskError(
            f"polygon for {annotation.slide_id} collapses to zero area at scale {scale}"
        )
    return RegionMask(origin=(x0, y0), width=w, height=h, bitmap=bitmap)


def major_axis(mask: RegionMask | np.ndarray) -> AxisSummary:
    """Principal axis from the second central moments of the set pixels.

    angle = 0.5 * atan2(2*mu11, mu20 - mu02); major_axis_length is 4x the
    square root of the covariance's largest eigenvalue (image-ellipse
    convention).
    """
    bitmap = mask.bitmap if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(bitmap)
    if xs.size == 0:
        raise DegenerateMaskError("mask has no set pixels")
    cx = float(xs.mean())
    cy = float(ys.mean())
    dx = xs - cx
    dy = ys - cy
    mu20 = float((dx * dx).mean())
    mu02 = float((dy * dy).mean())
    mu11 = float((dx * dy).mean())

    half_trace = 0.5 * (mu20 + mu02)
    discr = math.hypot(0.5 * (mu20 - mu02), mu11)
    largest = half_trace + discr
    if largest <= 0.0:
        raise ZeroAxisError("mask covariance has zero extent (single pixel?)")

    angle = 0.5 * math.degrees(math.atan2(2.0 * mu11, mu20 - mu02))
    if angle <= -90.0:
        angle += 180.0
    return AxisSummary(
        centroid=(cx, cy),
        major_axis_length=4.0 * math.sqrt(largest),
        angle_deg=angle,
    )


def _rotate_pair(
    image: np.ndarray, mask: np.ndarray, rotation_deg: float
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate image (bilinear) and mask (nearest) by the same expanding
    transform so they stay pixel-aligned.

    `rotation_deg` is measured in the (x right, y down) frame; PIL's rotate
    is counterclockwise on screen, hence the sign flip. Rotating about the
    canvas center rather than the mask centroid only translates the content,
    which the tight-bbox crop afterwards cancels out.
    """
    pil_angle = -rotation_deg
    img = Image.fromarray(image).rotate(
        pil_angle, resample=Image.BILINEAR, expand=True,
        fillcolor=(BACKGROUND_FILL,) * 3,
    )
    msk = Image.fromarray(mask.astype(np.uint8) * 255).rotate(
        pil_angle, resample=Image.NEAREST, expand=True, fillcolor=0
    )
    return np.asarray(img), np.asarray(msk) > 127


def _extend_span(lo: int, hi: int, limit: int, base: int = TILE) -> tuple[int, int, int, int]:
    """Grow [lo, hi) to the next multiple of `base`, centered and clamped.

    Returns (start, pad_before, pad_after, target): the clamped start inside
    [0, limit) plus explicit padding when the raster itself is too small.
    """
    size = hi - lo
    target = ((size + base - 1) // base) * base
    if target <= limit:
        start = lo - (target - size) // 2
        start = max(0, min(start, limit - target))
        return start, 0, 0, target
    pad_before = (target - limit) // 2
    return 0, pad_before, target - limit - pad_before, target


def orient_region(
    image: np.ndarray,
    mask: RegionMask,
    region_id: str,
    label: Label,
    scale: int = 0,
    max_pixels: int = DEFAULT_MAX_REGION_PIXELS,
) -> OrientedRegion:
    """Rotate a region upright and crop it to a 256-aligned bounding box.

    Rotation is (90 - major-axis angle), normalized to (-90, 90], about the
    mask centroid; the image resamples bilinearly, the mask nearest-neighbor.
    The tight post-rotation bounding box grows up to the next multiple of 256
    per dimension (centered, clamped at the canvas edges, white/empty padded).

    Raises OversizedRegionError when the region exceeds `max_pixels`; the
    pipeline records these in the skip log rather than aborting.
    """
    if image.shape[:2] != mask.bitmap.shape:
        raise ValueError(
            f"image {image.shape[:2]} and mask {mask.bitmap.shape} must cover the same area"
        )
    if image.shape[0] * image.shape[1] > max_pixels:
        raise OversizedRegionError(region_id, image.shape[0] * image.shape[1], max_pixels)

    axis = major_axis(mask)
    rotation = 90.0 - axis.angle_deg
    if rotation > 90.0:
        rotation -= 180.0

    rot_img, rot_mask = _rotate_pair(image, mask.bitmap, rotation)

    rows = np.flatnonzero(rot_mask.any(axis=1))
    cols = np.flatnonzero(rot_mask.any(axis=0))
    if rows.size == 0:
        raise DegenerateMaskError(f"region {region_id}: mask vanished during rotation")
    canvas_h, canvas_w = rot_mask.shape

    x_start, x_pad0, x_pad1, out_w = _extend_span(int(cols[0]), int(cols[-1]) + 1, canvas_w)
    y_start, y_pad0, y_pad1, out_h = _extend_span(int(rows[0]), int(rows[-1]) + 1, canvas_h)
    if out_w * out_h > max_pixels:
        raise OversizedRegionError(region_id, out_w * out_h, max_pixels)

    img_crop = rot_img[y_start : y_start + out_h - y_pad0 - y_pad1,
                       x_start : x_start + out_w - x_pad0 - x_pad1]
    mask_crop = rot_mask[y_start : y_start + out_h - y_pad0 - y_pad1,
                         x_start : x_start + out_w - x_pad0 - x_pad1]
    if x_pad0 or x_pad1 or y_pad0 or y_pad1:
        img_crop = np.pad(
            img_crop,
            ((y_pad0, y_pad1), (x_pad0, x_pad1), (0, 0)),
            constant_values=BACKGROUND_FILL,
        )
        mask_crop = np.pad(
            mask_crop, ((y_pad0, y_pad1), (x_pad0, x_pad1)), constant_values=False
        )

    return OrientedRegion(
        region_id=region_id,
        label=label,
        scale=check_scale(scale),
        image=np.ascontiguousarray(img_crop),
        mask=np.ascontiguousarray(mask_crop),
        rotation_deg=rotation,
        bbox=(x_start - x_pad0, y_start - y_pad0, out_w, out_h),
    )


def extract_region_at_scale(
    slide: SlideSource, bbox: tuple[int, int, int, int], scale: int
) -> np.ndarray:
    """Read a scale-0 rectangle from the slide, downsampled 4**scale."""
    x, y, w, h = bbox
    return slide.read_region(x, y, w, h, check_scale(scale))


def extract_annotated_region(
    slide: SlideSource,
    annotation: PolygonAnnotation,
    region_id: str,
    scale: int = 0,
    max_pixels: int = DEFAULT_MAX_REGION_PIXELS,
) -> OrientedRegion:
    """Full path for one polygon: rasterize at scale, read pixels, orient."""
    mask = rasterize_mask(annotation, scale)
    f = scale_factor(scale)
    x0, y0 = mask.origin
    sw, sh = slide.dimensions()
    # clamp the scale-0 read to the slide; polygons touching the border keep
    # their mask frame, out-of-slide pixels read as background
    bx, by = x0 * f, y0 * f
    bw, bh = mask.width * f, mask.height * f
    if bx + bw > sw or by + bh > sh or bx < 0 or by < 0:
        image = np.full((mask.height, mask.width, 3), BACKGROUND_FILL, dtype=np.uint8)
        ix0, iy0 = max(bx, 0), max(by, 0)
        ix1, iy1 = min(bx + bw, (sw // f) * f), min(by + bh, (sh // f) * f)
        if ix1 > ix0 and iy1 > iy0:
            sub = slide.read_region(ix0, iy0, ix1 - ix0, iy1 - iy0, scale)
            image[
                (iy0 - by) // f : (iy0 - by) // f + sub.shape[0],
                (ix0 - bx) // f : (ix0 - bx) // f + sub.shape[1],
            ] = sub
    else:
        image = slide.read_region(bx, by, bw, bh, scale)
    if image.shape[:2] != mask.bitmap.shape:
        # slide floor-division can come up a row/col short of the mask grid
        image = np.pad(
            image,
            (
                (0, mask.height - image.shape[0]),
                (0, mask.width - image.shape[1]),
                (0, 0),
            ),
            constant_values=BACKGROUND_FILL,
        )
    return orient_region(image, mask, region_id, annotation.label, scale, max_pixels)


@dataclass
class SampleShortfall:
    slide_id: str
    requested: int
    placed: int
    attempts: int


def sample_normal_regions(
    slide: SlideSource,
    annotations: list[PolygonAnnotation],
    count: int,
    rng_seed: int,
    scale: int = 0,
    region_size: int = 2 * TILE,
    tissue_threshold: float = 0.8,
    background_level: float = 230.0,
    max_attempts: int | None = None,
) -> tuple[list[OrientedRegion], SampleShortfall | None]:
    """Rejection-sample rectangular Normal regions from unannotated tissue.

    Accepted rectangles are disjoint from every annotated polygon and from
    each other, and contain at least `tissue_threshold` non-background pixels
    (background = mean RGB >= background_level). Returns fewer than `count`
    regions plus a shortfall record when placement keeps failing.
    """
    if region_size % TILE:
        raise ValueError(f"region_size must be a multiple of {TILE}")
    f = scale_factor(scale)
    ext = region_size * f
    sw, sh = slide.dimensions()
    rng = np.random.default_rng(rng_seed)
    budget = max_attempts if max_attempts is not None else 100 * count

    placed: list[tuple[int, int]] = []
    regions: list[OrientedRegion] = []
    attempts = 0
    full_mask = np.ones((region_size, region_size), dtype=bool)
    while len(regions) < count and attempts < budget:
        attempts += 1
        if sw < ext or sh < ext:
            break
        x = int(rng.integers(0, sw - ext + 1))
        y = int(rng.integers(0, sh - ext + 1))
        if any(abs(x - px) < ext and abs(y - py) < ext for px, py in placed):
            continue
        if any(
            rectangle_intersects_polygon(x, y, ext, ext, ann.vertices) for ann in annotations
        ):
            continue
        pixels = slide.read_region(x, y, ext, ext, scale)
        tissue = (pixels.mean(axis=2) < background_level).mean()
        if tissue < tissue_threshold:
            continue
        placed.append((x, y))
        regions.append(
            OrientedRegion(
                region_id=f"{slide.slide_id}_normal{len(regions):03d}",
                label=Label.NORMAL,
                scale=check_scale(scale),
                image=pixels,
                mask=full_mask.copy(),
                rotation_deg=0.0,
                bbox=(x, y, ext, ext),
            )
        )
    shortfall = None
    if len(regions) < count:
        shortfall = SampleShortfall(
            slide_id=slide.slide_id, requested=count, placed=len(regions), attempts=attempts
        )
    return regions, shortfall
