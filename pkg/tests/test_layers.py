import numpy as np
import pytest

from ggmcert.camera import CameraIntrinsics, PoseBox
from ggmcert.layers import eval_layers, expand_layers, layer_l1, polygon_output, relu
from ggmcert.raster import cross_term, decode, renderer
from ggmcert.target import load_target, make_target

FULL_RES_CAMERA = CameraIntrinsics(1600 / 3, 640, 480)


def test_quad_l2_width():
    t = make_target("sq", [[(0, 0), (1, 0), (1, 1), (0, 1)]])
    net = expand_layers(t, CameraIntrinsics(10.0, 4, 3))
    assert net.polygon_widths(0) == {"L0": 8, "L1": 4, "L2": 10, "L3": 2, "L4": 1}
    assert expand_layers(t, CameraIntrinsics(10.0, 4, 3), shared_sum=True).polygon_widths(0)["L2"] == 8


@pytest.mark.parametrize("name, l0, l1", [("stop_sign", 116, 17_817_600), ("slow_vehicle", 24, 3_686_400)])
def test_layer_sizes_at_full_resolution(name, l0, l1):
    sizes = expand_layers(load_target(name), FULL_RES_CAMERA).layer_sizes()
    assert sizes["L0"] == l0
    assert sizes["L1"] == l1
    assert sizes["L4"] == len(load_target(name).polygons) * 640 * 480


def test_l1_node_equals_cross_term():
    t = make_target("tri", [[(0, 0), (4, 0), (0, 4)]])
    net = expand_layers(t, CameraIntrinsics(10.0, 5, 5))
    pts = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    a1 = layer_l1(net, pts, 0)
    row = int(np.nonzero((net.qx == 2) & (net.qy == 1))[0][0])
    assert a1[row, 0] == 4 == cross_term((0, 0), (4, 0), (2, 1))


def test_relu_pair_is_absolute_value():
    a = np.array([-3.7, 0.0, 2.5])
    np.testing.assert_array_equal(relu(a) + relu(-a), [3.7, 0.0, 2.5])


def test_degenerate_projection_lights_the_line():
    # all vertices collinear on the pixel row y = 2: every cross product there is 0
    t = make_target("line", [[(0, 0), (1, 0), (2, 0)]])
    net = expand_layers(t, CameraIntrinsics(10.0, 6, 4))
    pts = np.array([[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]])
    out = polygon_output(net, pts, 0).reshape(4, 6)
    assert out[1].all()


def test_matches_decode_on_slow_vehicle(desk_camera, rng):
    t = load_target("slow_vehicle")
    net = expand_layers(t, desk_camera)
    box = PoseBox([-0.05, -0.05, 0.9, -0.2, -0.2, -0.2], [0.05, 0.05, 1.2, 0.2, 0.2, 0.2])
    q = box.sample(rng, 1000)
    imgs, ok = renderer(t, desk_camera).render(q)
    assert ok.sum() > 900
    for qi, im in zip(q[ok], imgs[ok]):
        assert np.array_equal(eval_layers(net, qi).bits, im)


@pytest.mark.parametrize("name", ["stop_sign", "runway"])
def test_matches_decode_other_targets(name, desk_camera, rng):
    t = load_target(name)
    net = expand_layers(t, desk_camera)
    box = PoseBox([-0.05, -0.05, 1.6, -0.1, -0.1, -0.1], [0.05, 0.05, 2.4, 0.1, 0.1, 0.1])
    for q in box.sample(rng, 50):
        assert eval_layers(net, q) == decode(t, q, desk_camera)
