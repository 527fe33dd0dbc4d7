"""Independent reference decoder used to check the fast rasterizer.

Projection goes through a generic 4x4 homogeneous transform assembled from
elementary rotations; pixel membership is decided in exact rational
arithmetic by intersecting each pixel row with the convex hull of the
projected vertices; composition uses the arithmetic min/max operator forms.
Nothing here shares code with :mod:`ggmcert.raster`.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import numpy as np

from .camera import CameraIntrinsics
from .target import BinOp, Expr, Leaf, Not, TargetModel


def homogeneous_transform(q: Sequence[float]) -> np.ndarray:
    x, y, z, roll, pitch, yaw = (float(v) for v in q)
    rx = np.array([[1, 0, 0], [0, math.cos(roll), -math.sin(roll)], [0, math.sin(roll), math.cos(roll)]])
    ry = np.array([[math.cos(pitch), 0, math.sin(pitch)], [0, 1, 0], [-math.sin(pitch), 0, math.cos(pitch)]])
    rz = np.array([[math.cos(yaw), -math.sin(yaw), 0], [math.sin(yaw), math.cos(yaw), 0], [0, 0, 1]])
    T = np.eye(4)
    T[:3, :3] = rz @ ry @ rx
    T[:3, 3] = [x, y, z]
    return T


def project_points(verts: np.ndarray, q: Sequence[float], k: CameraIntrinsics) -> np.ndarray:
    """(m, 3) homogeneous image coordinates K [R|t] (vx, vy, 0, 1)."""
    P = np.zeros((3, 4))
    P[:, :3] = k.matrix
    M = P @ homogeneous_transform(q)
    hv = np.column_stack([verts, np.zeros(len(verts)), np.ones(len(verts))])
    return hv @ M.T


def _cross(o, a, b) -> Fraction:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: list[tuple[Fraction, Fraction]]) -> list[tuple[Fraction, Fraction]]:
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def hull_mask(points: np.ndarray, W: int, H: int) -> np.ndarray:
    """Exact closed-hull membership of every integer pixel (1..W, 1..H)."""
    out = np.zeros((H, W), dtype=np.int64)
    fr = [(Fraction(float(px)), Fraction(float(py))) for px, py in points]
    hull = convex_hull(fr)
    n = len(hull)
    ys = [p[1] for p in hull]
    r0 = max(1, math.ceil(min(ys)))
    r1 = min(H, math.floor(max(ys)))
    for row in range(r0, r1 + 1):
        y = Fraction(row)
        xs: list[Fraction] = []
        if n == 1:
            if hull[0][1] == y:
                xs.append(hull[0][0])
        for i in range(n if n > 2 else n - 1):
            a, b = hull[i], hull[(i + 1) % n]
            if a[1] == b[1]:
                if a[1] == y:
                    xs += [a[0], b[0]]
            elif min(a[1], b[1]) <= y <= max(a[1], b[1]):
                xs.append(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]))
        if not xs:
            continue
        c0 = max(1, math.ceil(min(xs)))
        c1 = min(W, math.floor(max(xs)))
        if c0 <= c1:
            out[row - 1, c0 - 1 : c1] = 1
    return out


def compose_arith(expr: Expr, imgs: list[np.ndarray]) -> np.ndarray:
    if isinstance(expr, Leaf):
        return imgs[expr.index - 1]
    if isinstance(expr, Not):
        return 1 - compose_arith(expr.child, imgs)
    a = compose_arith(expr.left, imgs)
    b = compose_arith(expr.right, imgs)
    if expr.op == "|":
        return np.minimum(1, a + b)
    if expr.op == "&":
        return np.maximum(0, a + b - 1)
    either = np.minimum(1, a + b)
    both = np.maximum(0, a + b - 1)
    return np.maximum(0, either + (1 - both) - 1)


def oracle_decode(t: TargetModel, q: Sequence[float], k: CameraIntrinsics) -> np.ndarray:
    """(H, W) 0/1 int image of the target at pose q."""
    imgs = []
    for poly in t.polygons:
        hom = project_points(np.asarray(poly, dtype=np.float64), q, k)
        if np.any(hom[:, 2] <= 0):
            raise ValueError("vertex behind the camera")
        imgs.append(hull_mask(hom[:, :2] / hom[:, 2:3], k.W, k.H))
    return compose_arith(t.composition, imgs)
