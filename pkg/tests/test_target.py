import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggmcert.target import (
    TargetSpecError,
    TargetWarning,
    Winding,
    convexity_check,
    format_expression,
    leaves,
    load_target,
    make_target,
    parse_expression,
    parse_target_spec,
    serialize_target,
    validate_target,
    winding_orientation,
)

TRIANGLE_DOC = """<target name="tri">
  <point id="a" x="0" y="0"/>
  <point id="b" x="1" y="0"/>
  <point id="c" x="0" y="1"/>
  <polygon>a b c</polygon>
  <composition>P1</composition>
</target>
"""


def test_parse_minimal_triangle():
    t = parse_target_spec(TRIANGLE_DOC)
    assert t.size == 1
    assert t.vertex_count == 3
    assert t.name == "tri"
    assert leaves(t.composition) == [1]


def test_parse_default_composition_is_union():
    t = parse_target_spec(TRIANGLE_DOC.replace("<composition>P1</composition>", ""))
    assert format_expression(t.composition) == "P1"


def test_stop_sign_complexity():
    t = load_target("stop_sign")
    assert t.size == 13
    assert t.vertex_count == 58
    assert validate_target(t).failures == []


def test_slow_vehicle_complexity():
    t = load_target("slow_vehicle")
    assert (t.size, t.vertex_count) == (3, 12)


@pytest.mark.parametrize("name", ["stop_sign", "runway", "slow_vehicle"])
def test_shipped_targets_validate(name):
    rep = validate_target(load_target(name))
    assert rep.ok, rep.failures
    assert rep.warnings == []


def test_composition_reference_error():
    doc = """<target>
  <point id="1" x="0" y="0"/><point id="2" x="1" y="0"/><point id="3" x="0" y="1"/>
  <polygon>1 2 3</polygon>
  <polygon>1 2 3</polygon>
  <polygon>1 2 3</polygon>
  <composition>P1 | P5</composition>
</target>"""
    with pytest.raises(TargetSpecError) as exc:
        parse_target_spec(doc)
    assert "P5" in str(exc.value)
    assert exc.value.line == 6


def test_unknown_point_reports_line():
    doc = TRIANGLE_DOC.replace("a b c", "a b z")
    with pytest.raises(TargetSpecError) as exc:
        parse_target_spec(doc)
    assert exc.value.line == 5


def test_malformed_xml_reports_line():
    with pytest.raises(TargetSpecError) as exc:
        parse_target_spec('<target>\n<point id="1" x="0" y="0">\n</target>')
    assert exc.value.line is not None


def test_bad_coordinate():
    with pytest.raises(TargetSpecError):
        parse_target_spec(TRIANGLE_DOC.replace('x="1"', 'x="one"'))


def test_clockwise_polygon_is_reversed_with_warning():
    doc = TRIANGLE_DOC.replace("a b c", "a c b")
    with pytest.warns(TargetWarning):
        t = parse_target_spec(doc)
    assert winding_orientation(t.polygons[0]) is Winding.CCW
    assert t.notes


@pytest.mark.parametrize(
    "poly, expected",
    [
        ([(0, 0), (1, 0), (0, 1)], Winding.CCW),
        ([(0, 0), (0, 1), (1, 0)], Winding.CW),
        ([(0, 0), (1, 1), (2, 2)], Winding.DEGENERATE),
    ],
)
def test_winding_orientation(poly, expected):
    assert winding_orientation(poly) is expected


@pytest.mark.parametrize(
    "poly, expected",
    [
        ([(0, 0), (1, 0), (1, 1), (0, 1)], True),
        ([(0, 0), (2, 0), (1, 1), (2, 2), (0, 2)], False),
        ([(0, 0), (1, 0), (0, 1)], True),
        ([(0, 0), (1, 0), (2, 0), (1, 1)], False),
    ],
)
def test_convexity_check(poly, expected):
    assert convexity_check(poly) is expected


def test_pentagram_is_not_convex():
    import math

    star = [(math.cos(a), math.sin(a)) for a in [2 * math.pi * (2 * i) / 5 for i in range(5)]]
    assert not convexity_check(star)


def test_validate_reports_cw_polygon():
    t = make_target("t", [[(0, 0), (0, 1), (1, 0)]])
    rep = validate_target(t)
    assert [r for _, r in rep.failures] == ["clockwise winding"]


def test_validate_warns_on_unreferenced_polygon():
    t = make_target("t", [[(0, 0), (1, 0), (0, 1)], [(2, 2), (3, 2), (2, 3)]], "P1")
    rep = validate_target(t)
    assert rep.ok
    assert rep.warnings == [(2, "polygon not referenced by composition")]


def test_make_target_rejects_missing_reference():
    with pytest.raises(TargetSpecError):
        make_target("t", [[(0, 0), (1, 0), (0, 1)]], "P1 & P2")


@pytest.mark.parametrize("name", ["stop_sign", "runway", "slow_vehicle"])
def test_serialize_roundtrip(name):
    t = load_target(name)
    again = parse_target_spec(serialize_target(t))
    assert again == t
    assert serialize_target(again) == serialize_target(t)


@pytest.mark.parametrize("text", ["P1 | P2 & ~P3", "(P1 ^ P2) | P3", "~(P1 | P2)", "P1 & (P2 ^ ~P3)"])
def test_expression_format_roundtrip(text):
    e = parse_expression(text)
    assert parse_expression(format_expression(e)) == e


@pytest.mark.parametrize("text", ["P1 |", "P1 P2", "(P1", "Q1", "P0", ""])
def test_expression_syntax_errors(text):
    with pytest.raises(TargetSpecError):
        parse_expression(text)


coords = st.floats(-10, 10, allow_nan=False).map(lambda v: round(v, 3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(coords, coords), min_size=3, max_size=8, unique=True))
def test_reversal_flips_winding(poly):
    w = winding_orientation(poly)
    r = winding_orientation(poly[::-1])
    if w is Winding.DEGENERATE:
        assert r is Winding.DEGENERATE
    else:
        assert r is not w and r is not Winding.DEGENERATE


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(coords, coords), min_size=3, max_size=8, unique=True))
def test_convexity_invariant_under_rotation_of_start(poly):
    assert convexity_check(poly) == convexity_check(poly[1:] + poly[:1])
