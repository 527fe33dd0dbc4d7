import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import arith_and, arith_not, arith_or, arith_xor, in_triangle_barycentric, polygon_mask_barycentric

from ggmcert.bitimage import BitImage
from ggmcert.camera import CameraIntrinsics, PoseBox
from ggmcert.oracle import oracle_decode
from ggmcert.raster import (
    InvisiblePolygonError,
    compose,
    cross_term,
    decode,
    decode_reference,
    inside_test,
    project_polygon,
    rasterize_points,
    rasterize_polygon,
    renderer,
)
from ggmcert.target import load_target, make_target, parse_expression

coord = st.floats(-50, 50, allow_nan=False)
point = st.tuples(coord, coord)


def test_cross_term_example():
    assert cross_term((0, 0), (4, 0), (2, 1)) == 4


def test_cross_term_on_line_is_zero():
    assert cross_term((1, 1), (3, 5), (2, 3)) == 0
    assert cross_term((1, 1), (3, 5), (5, 9)) == 0


@settings(max_examples=300, deadline=None)
@given(point, point, point)
def test_cross_term_is_2d_cross_product(pi, pj, q):
    ref = (pj[0] - pi[0]) * (q[1] - pi[1]) - (pj[1] - pi[1]) * (q[0] - pi[0])
    assert math.isclose(cross_term(pi, pj, q), ref, rel_tol=1e-9, abs_tol=1e-7)


@pytest.mark.parametrize("pixel, expected", [((1, 1), 1), ((5, 5), 0), ((2, 0), 1), ((2, 2), 1), ((0, 0), 1), ((4.0001, 0), 0)])
def test_inside_test_triangle(pixel, expected):
    tri = [(0, 0), (4, 0), (0, 4)]
    assert inside_test(tri, pixel) == expected
    assert inside_test(tri, pixel) == int(in_triangle_barycentric(*tri, pixel))


def test_inside_test_orientation_independent():
    tri = [(0, 0), (4, 0), (0, 4)]
    for p in [(1, 1), (5, 5), (2, 2), (-1, 1)]:
        assert inside_test(tri, p) == inside_test(tri[::-1], p)


@settings(max_examples=150, deadline=None)
@given(point, point, point, st.tuples(st.integers(-60, 60), st.integers(-60, 60)))
def test_inside_test_matches_barycentric_oracle(a, b, c, p):
    area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(area2) < 1e-3:
        return
    # keep away from floating-point ties on the boundary
    for u, v in ((a, b), (b, c), (c, a)):
        if abs(cross_term(u, v, p)) < 1e-6 * (1 + abs(area2)):
            return
    assert inside_test([a, b, c], p) == int(in_triangle_barycentric(a, b, c, p))


@settings(max_examples=100, deadline=None)
@given(point, point, point, st.floats(0.01, 100), st.tuples(st.integers(-60, 60), st.integers(-60, 60)))
def test_sign_test_invariant_under_homogeneous_scaling(a, b, c, s, p):
    # scaling (px, py, pz) jointly leaves px/pz, py/pz and hence the decision unchanged
    hom = np.array([[a[0], a[1], 1.0], [b[0], b[1], 1.0], [c[0], c[1], 1.0]]) * s
    pts = hom[:, :2] / hom[:, 2:]
    assert inside_test(pts, p) == inside_test([a, b, c], p)


def test_rasterized_triangle_matches_barycentric_oracle():
    tri = np.array([[3.3, 2.1], [17.8, 5.5], [6.2, 13.9]])
    np.testing.assert_array_equal(rasterize_points(tri, 20, 16), polygon_mask_barycentric(tri, 20, 16))


def test_polygon_off_image_is_empty():
    k = CameraIntrinsics(100.0, 64, 48)
    img = rasterize_polygon([(2, 2), (3, 2), (3, 3), (2, 3)], (0, 0, 1, 0, 0, 0), k)
    assert img.count() == 0


@pytest.mark.parametrize("side, z", [(0.2, 1.0), (0.1, 0.7), (0.3, 2.0)])
def test_centered_square_area(side, z):
    k = CameraIntrinsics(100.0, 64, 48)
    h = side / 2
    img = rasterize_polygon([(-h, -h), (h, -h), (h, h), (-h, h)], (0, 0, z, 0, 0, 0), k)
    px = k.f * side / z
    assert abs(img.count() - px * px) <= 4 * px
    ys, xs = np.nonzero(img.bits)
    # centred on the principal point (32, 24) in 1-based pixel coordinates
    assert abs((xs.mean() + 1) - 32) <= 1 and abs((ys.mean() + 1) - 24) <= 1


def test_rasterize_behind_camera_raises():
    k = CameraIntrinsics(100.0, 64, 48)
    with pytest.raises(InvisiblePolygonError):
        rasterize_polygon([(0, 0), (1, 0), (0, 1)], (0, 0, -1, 0, 0, 0), k)


def test_compose_examples():
    ones, zeros = BitImage.ones(5, 4), BitImage.zeros(5, 4)
    assert compose(parse_expression("P1 | P2"), [ones, zeros]) == ones
    img = BitImage(np.random.default_rng(0).random((4, 5)) < 0.5)
    assert compose(parse_expression("P1 ^ P2"), [img, img]) == zeros
    assert compose(parse_expression("!P1"), [img]) == ~img


def test_compose_dimension_mismatch():
    with pytest.raises(ValueError):
        compose(parse_expression("P1 | P2"), [BitImage.zeros(2, 2), BitImage.zeros(3, 2)])


pairs = st.tuples(st.integers(1, 16), st.integers(1, 16)).flatmap(lambda s: st.tuples(arrays(bool, s), arrays(bool, s)))


@settings(max_examples=300, deadline=None)
@given(pairs)
def test_composition_algebra(pair):
    a, b = (BitImage(x) for x in pair)
    ia, ib = (x.astype(int) for x in pair)
    OR = compose(parse_expression("P1 | P2"), [a, b])
    AND = compose(parse_expression("P1 & P2"), [a, b])
    XOR = compose(parse_expression("P1 ^ P2"), [a, b])
    # arithmetic min/max forms
    assert np.array_equal(OR.bits, arith_or(ia, ib).astype(bool))
    assert np.array_equal(AND.bits, arith_and(ia, ib).astype(bool))
    assert np.array_equal(XOR.bits, arith_xor(ia, ib).astype(bool))
    assert np.array_equal((~a).bits, arith_not(ia).astype(bool))
    # De Morgan, XOR identity, monotonicity
    assert compose(parse_expression("!(P1 | P2)"), [a, b]) == compose(parse_expression("!P1 & !P2"), [a, b])
    assert XOR == compose(parse_expression("(P1 | P2) & !(P1 & P2)"), [a, b])
    assert (OR & a) == a
    assert (AND | a) == a


def test_single_triangle_decode_is_rasterize(desk_camera):
    tri = [(-0.1, -0.1), (0.15, -0.05), (0.0, 0.12)]
    t = make_target("tri", [tri])
    q = (0.01, -0.02, 0.9, 0.1, -0.05, 0.3)
    assert decode(t, q, desk_camera) == rasterize_polygon(tri, q, desk_camera)


def test_stop_sign_reference_poses_nonempty():
    # full-resolution camera; these poses leave part of the sign outside the frame, so render clipped
    t = load_target("stop_sign")
    k = CameraIntrinsics(1600 / 3, 640, 480)
    poses = [
        (-0.015, -0.435, 0.598, -0.096, 0.086, -0.047),
        (-0.133, -0.433, 0.885, -0.128, -0.196, -0.087),
        (-0.327, 0.015, 0.949, -0.310, -0.153, -0.326),
        (-0.476, -0.383, 1.084, 0.159, -0.267, -0.084),
    ]
    for q in poses:
        assert decode(t, q, k, strict=False).count() > 0


def test_yaw_periodicity(slow_vehicle, desk_camera):
    q = np.array([0.002, -0.003, 1.0, 0.05, -0.04, 0.3])
    q2 = q.copy()
    q2[5] += 2 * math.pi
    a, b = decode(slow_vehicle, q, desk_camera), decode(slow_vehicle, q2, desk_camera)
    assert a == b


def test_strict_decode_rejects_partial_view(slow_vehicle, desk_camera):
    with pytest.raises(InvisiblePolygonError):
        decode(slow_vehicle, (0.5, 0, 1, 0, 0, 0), desk_camera)
    assert decode(slow_vehicle, (0.5, 0, 1, 0, 0, 0), desk_camera, strict=False).count() > 0


@pytest.mark.parametrize("name", ["stop_sign", "runway", "slow_vehicle"])
def test_batch_decode_matches_reference_and_oracle(name, rng):
    t = load_target(name)
    k = CameraIntrinsics(53.333, 64, 48)
    box = PoseBox([-0.05, -0.05, 1.6, -0.1, -0.1, -0.1], [0.05, 0.05, 2.4, 0.1, 0.1, 0.1])
    r = renderer(t, k)
    q = box.sample(rng, 30)
    imgs, ok = r.render(q)
    assert ok.all()
    for qi, im in zip(q, imgs):
        assert decode_reference(t, qi, k) == BitImage(im)
        np.testing.assert_array_equal(oracle_decode(t, qi, k).astype(bool), im)


def test_project_polygon_depth_check(desk_camera):
    with pytest.raises(InvisiblePolygonError):
        project_polygon([(0, 0), (1, 0), (0, 1)], (0, 0, 0, 0, 0, 0), desk_camera)
