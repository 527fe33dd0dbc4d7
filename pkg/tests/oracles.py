"""Independent reference implementations used only by the tests.

None of these share code with the package: geometry is redone with
axis-angle (Rodrigues) rotations and 4x4 homogeneous matrices, point
membership with barycentric coordinates in exact rationals, and the
composition algebra with min/max arithmetic.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def rodrigues(axis, angle):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def transform4(q):
    """4x4 target-to-camera transform: yaw about z after pitch about y after roll about x."""
    x, y, z, roll, pitch, yaw = q
    R = rodrigues((0, 0, 1), yaw) @ rodrigues((0, 1, 0), pitch) @ rodrigues((1, 0, 0), roll)
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = (x, y, z)
    return M


def project4(v, q, f, W, H):
    """Homogeneous projection of a target-plane vertex through K [R|T]."""
    K = np.array([[f, 0, W / 2, 0], [0, f, H / 2, 0], [0, 0, 1, 0]], dtype=np.float64)
    return K @ transform4(q) @ np.array([v[0], v[1], 0.0, 1.0])


def in_triangle_barycentric(a, b, c, p) -> bool:
    """Exact barycentric membership, boundary inclusive."""
    a, b, c, p = ([Fraction(float(t)) for t in v] for v in (a, b, c, p))
    det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
    if det == 0:
        return False
    l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det
    l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det
    l3 = 1 - l1 - l2
    return l1 >= 0 and l2 >= 0 and l3 >= 0


def in_convex_fan(points, p) -> bool:
    """Membership in a convex polygon as a union of fan triangles."""
    return any(in_triangle_barycentric(points[0], points[i], points[i + 1], p) for i in range(1, len(points) - 1))


def polygon_mask_barycentric(points, W, H) -> np.ndarray:
    out = np.zeros((H, W), dtype=bool)
    for py in range(1, H + 1):
        for px in range(1, W + 1):
            out[py - 1, px - 1] = in_convex_fan(points, (px, py))
    return out


def arith_or(a, b):
    return np.maximum(a, b)


def arith_and(a, b):
    return np.minimum(a, b)


def arith_not(a):
    return 1 - a


def arith_xor(a, b):
    return np.abs(a - b)
