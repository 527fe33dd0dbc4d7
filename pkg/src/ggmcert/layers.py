"""Layer-form decoder: the sign test unrolled into explicit network layers.

Per (polygon, pixel) pair with an m-vertex polygon:

* L0 - 2m inputs, the projected vertex coordinates
* L1 - m cross products, each linear in the pixel coordinates:
  a_k = qy * dx_k - qx * dy_k + c_k
* L2 - 2m + 2 paired ReLUs: max(a_k, 0), max(-a_k, 0) and the same pair for
  the sum of all a_k
* L3 - two sums: sum_k |a_k| and |sum_k a_k|
* L4 - one threshold unit: 1 iff the two L3 values agree within tau_eq

The polygon outputs are then combined with the arithmetic operator forms
(NOT = 1 - a, OR = min(1, a + b), AND = max(0, a + b - 1)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bitimage import BitImage
from .camera import CameraIntrinsics, normalized_points, project_vertices
from .target import BinOp, Expr, Leaf, Not, TargetModel


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


@dataclass(frozen=True)
class LayerNet:
    target: TargetModel
    camera: CameraIntrinsics
    qx: np.ndarray  # (P,) pixel x coordinate per pixel row of the network
    qy: np.ndarray  # (P,)
    edges: tuple[tuple[np.ndarray, np.ndarray], ...]  # per polygon: (i, j) vertex index arrays
    tau_rel: float = 1e-9
    shared_sum: bool = False

    @property
    def pixels(self) -> int:
        return self.camera.W * self.camera.H

    def layer_sizes(self) -> dict[str, int]:
        """Node counts of each layer, summed over polygons and pixels."""
        ms = [len(i) for i, _ in self.edges]
        P = self.pixels
        l2_per = sum(2 * m for m in ms) + (0 if self.shared_sum else 2 * len(ms))
        return {
            "L0": 2 * sum(ms),
            "L1": sum(ms) * P,
            "L2": l2_per * P,
            "L3": 2 * len(ms) * P,
            "L4": len(ms) * P,
        }

    def polygon_widths(self, index: int) -> dict[str, int]:
        m = len(self.edges[index][0])
        return {"L0": 2 * m, "L1": m, "L2": 2 * m + (0 if self.shared_sum else 2), "L3": 2, "L4": 1}


def expand_layers(t: TargetModel, k: CameraIntrinsics, tau_rel: float = 1e-9, shared_sum: bool = False) -> LayerNet:
    qy, qx = np.mgrid[1 : k.H + 1, 1 : k.W + 1]
    edges = []
    for poly in t.polygons:
        m = len(poly)
        i = np.arange(m)
        edges.append((i, (i + 1) % m))
    return LayerNet(
        target=t,
        camera=k,
        qx=qx.ravel().astype(np.float64),
        qy=qy.ravel().astype(np.float64),
        edges=tuple(edges),
        tau_rel=tau_rel,
        shared_sum=shared_sum,
    )


def layer_l1(net: LayerNet, points: np.ndarray, index: int) -> np.ndarray:
    """Cross products for polygon `index`: (pixels, m)."""
    i, j = net.edges[index]
    pix, piy = points[i, 0], points[i, 1]
    pjx, pjy = points[j, 0], points[j, 1]
    return net.qy[:, None] * (pjx - pix)[None, :] - net.qx[:, None] * (pjy - piy)[None, :] + (pix * pjy - pjx * piy)[None, :]


def polygon_output(net: LayerNet, points: np.ndarray, index: int) -> np.ndarray:
    a1 = layer_l1(net, points, index)
    # L2: paired ReLUs of each term and of the sum
    pos, neg = relu(a1), relu(-a1)
    if net.shared_sum:
        s = a1.sum(axis=1)
        abs_sum = relu(s) + relu(-s)
    else:
        s = a1.sum(axis=1)
        spos, sneg = relu(s), relu(-s)
        abs_sum = spos + sneg
    # L3
    sum_abs = (pos + neg).sum(axis=1)
    # L4
    return (np.abs(sum_abs - abs_sum) <= net.tau_rel * sum_abs).astype(np.int64)


def _compose(expr: Expr, outs: list[np.ndarray]) -> np.ndarray:
    if isinstance(expr, Leaf):
        return outs[expr.index - 1]
    if isinstance(expr, Not):
        return 1 - _compose(expr.child, outs)
    a, b = _compose(expr.left, outs), _compose(expr.right, outs)
    if expr.op == "|":
        return np.minimum(1, a + b)
    if expr.op == "&":
        return np.maximum(0, a + b - 1)
    return np.maximum(0, np.minimum(1, a + b) - np.maximum(0, a + b - 1))


def eval_layers(net: LayerNet, q: Sequence[float]) -> BitImage:
    verts, offsets = net.target.vertex_array()
    hom = project_vertices(verts, np.asarray(q, dtype=np.float64)[None, :], net.camera)[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = normalized_points(hom)
    outs = [polygon_output(net, pts[offsets[p] : offsets[p + 1]], p) for p in range(len(net.edges))]
    img = _compose(net.target.composition, outs)
    return BitImage(img.reshape(net.camera.H, net.camera.W).astype(bool))
