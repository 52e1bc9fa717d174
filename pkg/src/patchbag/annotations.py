"""Polygon annotation parsing and planar geometry predicates.

Annotation documents are XML with one ``<region label="...">`` element per
tumour polygon and ordered ``<vertex x="" y=""/>`` children, all coordinates
at scale 0. Element and attribute names are matched case-insensitively.
Optional ``width``/``height`` attributes on the root enable slide-bounds
validation. Only the three tumour classes may appear; Normal tissue is never
annotated.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import ANNOTATABLE, Label, UnknownLabelError, parse_label


class AnnotationParseError(ValueError):
    """Malformed annotation document; message carries line/element context."""


@dataclass
class PolygonAnnotation:
    slide_id: str
    label: Label
    vertices: np.ndarray  # (n, 2) float64, scale-0 pixels
    simple: bool = field(default=True)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise AnnotationParseError(
                f"vertices must be an (n, 2) array, got shape {self.vertices.shape}"
            )
        if len(self.vertices) < 3:
            raise AnnotationParseError(
                f"polygon needs at least 3 vertices, got {len(self.vertices)}"
            )

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y) at scale 0."""
        mn = self.vertices.min(axis=0)
        mx = self.vertices.max(axis=0)
        return float(mn[0]), float(mn[1]), float(mx[0]), float(mx[1])


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    """True when open segments p1p2 and q1q2 cross at an interior point."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 \
        and d3 != 0 and d4 != 0


def polygon_is_simple(vertices: np.ndarray) -> bool:
    """Brute-force non-self-intersection check over all edge pairs."""
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    edges = [(v[i], v[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_properly_intersect(*edges[i], *edges[j]):
                return False
    return True


def winding_number(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Vectorized winding number of each query point w.r.t. the polygon.

    Nonzero winding means inside. Points exactly on an edge follow the
    half-open crossing convention and land consistently on one side.
    """
    pts = np.asarray(points, dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    x = pts[:, 0]
    y = pts[:, 1]
    wn = np.zeros(len(pts), dtype=np.int32)
    n = len(v)
    for i in range(n):  # edge loop keeps peak memory at O(n_points)
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (x - x1) * (y2 - y1)
        wn += (y1 <= y) & (y2 > y) & (cross > 0)
        wn -= (y1 > y) & (y2 <= y) & (cross < 0)
    return wn


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    return winding_number(points, vertices) != 0


def rectangle_intersects_polygon(
    x: float, y: float, w: float, h: float, vertices: np.ndarray
) -> bool:
    """Exact overlap test between an axis-aligned rectangle and a polygon.

    Covers all cases for simple polygons: a polygon vertex inside the
    rectangle, a rectangle corner inside the polygon, or crossing edges.
    """
    v = np.asarray(vertices, dtype=np.float64)
    inside_rect = (v[:, 0] >= x) & (v[:, 0] <= x + w) & (v[:, 1] >= y) & (v[:, 1] <= y + h)
    if inside_rect.any():
        return True
    corners = np.array([[x, y], [x + w, y], [x + w, y + h], [x, y + h]])
    if points_in_polygon(corners, v).any():
        return True
    rect_edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
    n = len(v)
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        for c, d in rect_edges:
            if _segments_properly_intersect(a, b, c, d):
                return True
    return False


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1].lower()


def _attrs_ci(elem) -> dict[str, str]:
    return {k.rsplit("}", 1)[-1].lower(): v for k, v in elem.attrib.items()}


def parse_annotations(path: str | Path) -> list[PolygonAnnotation]:
    """Parse an annotation document into one PolygonAnnotation per region.

    Raises AnnotationParseError for structural problems (with line or element
    context) and UnknownLabelError when a region's label is not one of the
    annotatable tumour classes.
    """
    path = Path(path)
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        line, col = exc.position
        raise AnnotationParseError(f"{path}: malformed XML at line {line}, column {col}: {exc.msg}") from exc

    root = tree.getroot()
    if _local(root.tag) != "annotations":
        raise AnnotationParseError(
            f"{path}: root element must be <annotations>, found <{root.tag}>"
        )
    root_attrs = _attrs_ci(root)
    slide_id = root_attrs.get("slide_id", path.stem)
    width = float(root_attrs["width"]) if "width" in root_attrs else None
    height = float(root_attrs["height"]) if "height" in root_attrs else None

    out = []
    for idx, region in enumerate(root):
        if _local(region.tag) != "region":
            raise AnnotationParseError(
                f"{path}: element {idx} under root must be <region>, found <{region.tag}>"
            )
        attrs = _attrs_ci(region)
        if "label" not in attrs:
            raise AnnotationParseError(f"{path}: region {idx} is missing its label attribute")
        label = parse_label(attrs["label"])
        if label not in ANNOTATABLE:
            raise UnknownLabelError(
                f"{path}: region {idx} has label {attrs['label']!r}; "
                "Normal regions are never annotated"
            )

        verts = []
        for velem in region:
            if _local(velem.tag) != "vertex":
                raise AnnotationParseError(
                    f"{path}: region {idx} contains unexpected element <{velem.tag}>"
                )
            vattrs = _attrs_ci(velem)
            try:
                verts.append((float(vattrs["x"]), float(vattrs["y"])))
            except (KeyError, ValueError) as exc:
                raise AnnotationParseError(
                    f"{path}: region {idx} vertex {len(verts)} has bad x/y attributes"
                ) from exc
        if len(verts) < 3:
            raise AnnotationParseError(
                f"{path}: region {idx} has {len(verts)} vertices; a polygon needs at least 3"
            )
        varr = np.array(verts, dtype=np.float64)
        if (varr < 0).any():
            raise AnnotationParseError(f"{path}: region {idx} has negative coordinates")
        if width is not None and (varr[:, 0] > width).any():
            raise AnnotationParseError(f"{path}: region {idx} exceeds slide width {width}")
        if height is not None and (varr[:, 1] > height).any():
            raise AnnotationParseError(f"{path}: region {idx} exceeds slide height {height}")

        out.append(
            PolygonAnnotation(
                slide_id=slide_id,
                label=label,
                vertices=varr,
                simple=polygon_is_simple(varr),
            )
        )
    return out


def write_annotations(
    path: str | Path,
    slide_id: str,
    regions: list[tuple[Label, np.ndarray]],
    slide_size: tuple[int, int] | None = None,
) -> None:
    """Emit the annotation XML this module parses (fixtures and exports)."""
    root = ET.Element("annotations", {"slide_id": slide_id})
    if slide_size is not None:
        root.set("width", str(slide_size[0]))
        root.set("height", str(slide_size[1]))
    for label, verts in regions:
        region = ET.SubElement(root, "region", {"label": label.display})
        for vx, vy in np.asarray(verts, dtype=np.float64):
            ET.SubElement(region, "vertex", {"x": repr(float(vx)), "y": repr(float(vy))})
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
