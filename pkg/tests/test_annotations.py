import numpy as np
import pytest

from patchbag.annotations import (
    AnnotationParseError,
    PolygonAnnotation,
    parse_annotations,
    points_in_polygon,
    polygon_is_simple,
    rectangle_intersects_polygon,
    write_annotations,
)
from patchbag.labels import Label, UnknownLabelError

SQUARE = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])


def write_doc(path, body, slide="s1", extra=""):
    path.write_text(f'<?xml version="1.0"?>\n<annotations slide_id="{slide}"{extra}>\n{body}\n</annotations>')


def region_xml(label, verts):
    vs = "\n".join(f'  <vertex x="{x}" y="{y}"/>' for x, y in verts)
    return f'<region label="{label}">\n{vs}\n</region>'


def test_minimal_document(tmp_path):
    doc = tmp_path / "a.xml"
    write_doc(doc, region_xml("Benign", SQUARE))
    anns = parse_annotations(doc)
    assert len(anns) == 1
    assert anns[0].label is Label.BENIGN
    assert len(anns[0].vertices) == 4
    assert anns[0].slide_id == "s1"


def test_dataset_scale_counts(tmp_path):
    # the full-dataset mix: 57 benign, 109 invasive, 60 in-situ polygons
    parts = []
    for label, n in (("Benign", 57), ("Invasive", 109), ("InSitu", 60)):
        parts.extend(region_xml(label, SQUARE + 12 * i) for i in range(n))
    doc = tmp_path / "all.xml"
    write_doc(doc, "\n".join(parts))
    anns = parse_annotations(doc)
    assert len(anns) == 226
    counts = {lab: sum(1 for a in anns if a.label is lab) for lab in Label}
    assert counts[Label.BENIGN] == 57
    assert counts[Label.INVASIVE] == 109
    assert counts[Label.IN_SITU] == 60
    assert counts[Label.NORMAL] == 0


def test_two_vertex_polygon_rejected(tmp_path):
    doc = tmp_path / "bad.xml"
    write_doc(doc, region_xml("Benign", [(0, 0), (5, 5)]))
    with pytest.raises(AnnotationParseError, match="at least 3"):
        parse_annotations(doc)


def test_unknown_label_echoed(tmp_path):
    doc = tmp_path / "bad.xml"
    write_doc(doc, region_xml("Metastatic", SQUARE))
    with pytest.raises(UnknownLabelError, match="Metastatic"):
        parse_annotations(doc)


def test_normal_label_rejected(tmp_path):
    doc = tmp_path / "bad.xml"
    write_doc(doc, region_xml("Normal", SQUARE))
    with pytest.raises(UnknownLabelError, match="never annotated"):
        parse_annotations(doc)


def test_malformed_xml_reports_line(tmp_path):
    doc = tmp_path / "broken.xml"
    doc.write_text('<?xml version="1.0"?>\n<annotations>\n<region label="Benign">\n')
    with pytest.raises(AnnotationParseError, match="line"):
        parse_annotations(doc)


def test_negative_coordinates_rejected(tmp_path):
    doc = tmp_path / "neg.xml"
    write_doc(doc, region_xml("Benign", [(-1, 0), (5, 0), (5, 5)]))
    with pytest.raises(AnnotationParseError, match="negative"):
        parse_annotations(doc)


def test_slide_bounds_enforced_when_present(tmp_path):
    doc = tmp_path / "oob.xml"
    write_doc(doc, region_xml("Benign", [(0, 0), (500, 0), (500, 5)]), extra=' width="100" height="100"')
    with pytest.raises(AnnotationParseError, match="width"):
        parse_annotations(doc)


def test_case_insensitive_elements(tmp_path):
    doc = tmp_path / "caps.xml"
    doc.write_text(
        '<ANNOTATIONS SLIDE_ID="s9">'
        '<Region LABEL="invasive"><VERTEX X="0" Y="0"/><vertex x="4" y="0"/>'
        '<vertex x="4" y="4"/></Region></ANNOTATIONS>'
    )
    anns = parse_annotations(doc)
    assert anns[0].label is Label.INVASIVE
    assert anns[0].slide_id == "s9"


def test_self_intersection_flagged(tmp_path):
    bowtie = [(0, 0), (10, 10), (10, 0), (0, 10)]
    doc = tmp_path / "bow.xml"
    write_doc(doc, region_xml("Benign", bowtie))
    anns = parse_annotations(doc)
    assert anns[0].simple is False
    assert polygon_is_simple(SQUARE) is True


def test_write_then_parse_round_trip(tmp_path):
    doc = tmp_path / "rt.xml"
    tri = np.array([[1.5, 2.5], [90.0, 3.0], [45.25, 80.0]])
    write_annotations(doc, "sl", [(Label.IN_SITU, tri), (Label.BENIGN, SQUARE)], (128, 128))
    anns = parse_annotations(doc)
    assert [a.label for a in anns] == [Label.IN_SITU, Label.BENIGN]
    np.testing.assert_allclose(anns[0].vertices, tri)


def test_points_in_polygon_matches_crossing_oracle(rng):
    # oracle: classic even-odd ray casting, written independently
    def even_odd(px, py, verts):
        inside = False
        n = len(verts)
        for i in range(n):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % n]
            if (y1 > py) != (y2 > py):
                xin = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                if px < xin:
                    inside = not inside
        return inside

    verts = np.array([[2.0, 1.0], [9.0, 2.5], [7.5, 9.0], [4.0, 6.0], [1.0, 8.0]])
    pts = rng.uniform(0, 10, size=(300, 2))
    got = points_in_polygon(pts, verts)
    want = np.array([even_odd(x, y, verts) for x, y in pts])
    assert (got == want).all()


def test_rectangle_polygon_intersection_cases():
    tri = np.array([[5.0, 5.0], [15.0, 5.0], [5.0, 15.0]])
    assert rectangle_intersects_polygon(0, 0, 6, 6, tri)  # corner overlap
    assert rectangle_intersects_polygon(6, 6, 1, 1, tri)  # rect inside polygon
    assert rectangle_intersects_polygon(0, 0, 30, 30, tri)  # polygon inside rect
    assert not rectangle_intersects_polygon(16, 16, 5, 5, tri)  # disjoint
    assert not rectangle_intersects_polygon(0, 0, 4.9, 4.9, tri)


def test_polygon_annotation_validates_shape():
    with pytest.raises(AnnotationParseError):
        PolygonAnnotation("s", Label.BENIGN, np.zeros((2, 2)))
    with pytest.raises(AnnotationParseError):
        PolygonAnnotation("s", Label.BENIGN, np.zeros((4, 3)))
