"""Pinhole camera: extrinsic transform, intrinsic projection, pixel quantization.

Poses are (x, y, z, roll, pitch, yaw).  A target-frame vertex v = (vx, vy, 0)
maps to camera coordinates R(roll, pitch, yaw) v + (x, y, z), with
R = Rz(yaw) Ry(pitch) Rx(roll).  Pixels are 1-based; the principal point is
fixed at (W/2, H/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

POSE_FIELDS = ("x", "y", "z", "roll", "pitch", "yaw")


class InvisiblePointError(ValueError):
    pass


class Pose(NamedTuple):
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    @classmethod
    def of(cls, values: Sequence[float]) -> "Pose":
        return cls(*(float(v) for v in values))


class HomogeneousProjection(NamedTuple):
    px: float
    py: float
    pz: float


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    W: int
    H: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if self.W < 1 or self.H < 1:
            raise ValueError("image dimensions must be at least 1")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.f, 0.0, self.W / 2], [0.0, self.f, self.H / 2], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {"f": self.f, "W": self.W, "H": self.H}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        if "f" in d:
            f = float(d["f"])
        else:
            f = focal_length_px(float(d["focal_mm"]), float(d["pixel_um"]))
        return cls(f, int(d["W"]), int(d["H"]))


def focal_length_px(focal_mm: float, pixel_um: float) -> float:
    """Focal length in pixels from a lens focal length and a pixel pitch."""
    return focal_mm * 1e-3 / (pixel_um * 1e-6)


def scaled_camera(cam: CameraIntrinsics, W: int, H: int) -> CameraIntrinsics:
    """Same field of view at a different resolution (scaled by width)."""
    return CameraIntrinsics(cam.f * W / cam.W, W, H)


class PoseBox:
    """Axis-aligned box in pose space; zero-width dimensions are fixed."""

    def __init__(self, lower: Sequence[float], upper: Sequence[float]):
        lo = np.asarray(lower, dtype=np.float64).reshape(6)
        hi = np.asarray(upper, dtype=np.float64).reshape(6)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("pose box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("pose box lower bound exceeds upper bound")
        lo.flags.writeable = False
        hi.flags.writeable = False
        self.lower = lo
        self.upper = hi

    @classmethod
    def around(cls, center: Sequence[float], half_width: Sequence[float]) -> "PoseBox":
        c = np.asarray(center, dtype=np.float64)
        r = np.asarray(half_width, dtype=np.float64)
        return cls(c - r, c + r)

    @classmethod
    def point(cls, q: Sequence[float]) -> "PoseBox":
        return cls(q, q)

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def free_dims(self) -> np.ndarray:
        return np.nonzero(self.upper > self.lower)[0]

    def contains(self, q: Sequence[float], tol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=np.float64)
        return bool(np.all(q >= self.lower - tol) and np.all(q <= self.upper + tol))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, 6))
        return self.lower + u * self.span

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PoseBox)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __repr__(self) -> str:
        return f"PoseBox(lower={self.lower.tolist()}, upper={self.upper.tolist()})"

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseBox":
        return cls(d["lower"], d["upper"])


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) Ry(pitch) Rx(roll), written out entrywise."""
    cf, sf = math.cos(roll), math.sin(roll)
    ct, st = math.cos(pitch), math.sin(pitch)
    cp, sp = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
            [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
            [-st, ct * sf, ct * cf],
        ]
    )


def rotation_matrices(poses: np.ndarray) -> np.ndarray:
    """Batch version of rotation_matrix for an (N, 6) pose array -> (N, 3, 3)."""
    poses = np.asarray(poses, dtype=np.float64)
    cf, sf = np.cos(poses[:, 3]), np.sin(poses[:, 3])
    ct, st = np.cos(poses[:, 4]), np.sin(poses[:, 4])
    cp, sp = np.cos(poses[:, 5]), np.sin(poses[:, 5])
    R = np.empty((len(poses), 3, 3))
    R[:, 0, 0] = cp * ct
    R[:, 0, 1] = cp * st * sf - sp * cf
    R[:, 0, 2] = cp * st * cf + sp * sf
    R[:, 1, 0] = sp * ct
    R[:, 1, 1] = sp * st * sf + cp * cf
    R[:, 1, 2] = sp * st * cf - cp * sf
    R[:, 2, 0] = -st
    R[:, 2, 1] = ct * sf
    R[:, 2, 2] = ct * cf
    return R


def to_camera_frame(v: Sequence[float], q: Sequence[float]) -> np.ndarray:
    R = rotation_matrix(q[3], q[4], q[5])
    # the target lies in its z = 0 plane, so only the first two columns act
    return R[:, 0] * v[0] + R[:, 1] * v[1] + np.array([q[0], q[1], q[2]], dtype=np.float64)


def analog_project(
    v: Sequence[float], q: Sequence[float], k: CameraIntrinsics
) -> HomogeneousProjection:
    c = to_camera_frame(v, q)
    return HomogeneousProjection(
        k.f * c[0] + k.W / 2 * c[2],
        k.f * c[1] + k.H / 2 * c[2],
        c[2],
    )


def to_pixel(h: Sequence[float], rounding: str = "floor") -> tuple[int, int]:
    px, py, pz = h
    if not pz > 0:
        raise InvisiblePointError(f"point has non-positive depth {pz}")
    u, v = px / pz, py / pz
    if rounding == "floor":
        return math.floor(u), math.floor(v)
    if rounding == "nearest":
        return math.floor(u + 0.5), math.floor(v + 0.5)
    raise ValueError(f"unknown rounding mode {rounding!r}")


def project_vertices(verts: np.ndarray, poses: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Homogeneous projections of (V, 2) target vertices for (N, 6) poses -> (N, V, 3)."""
    poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
    R = rotation_matrices(poses)
    vx = verts[:, 0][None, :]
    vy = verts[:, 1][None, :]
    cx = R[:, 0, 0][:, None] * vx + R[:, 0, 1][:, None] * vy + poses[:, 0][:, None]
    cy = R[:, 1, 0][:, None] * vx + R[:, 1, 1][:, None] * vy + poses[:, 1][:, None]
    cz = R[:, 2, 0][:, None] * vx + R[:, 2, 1][:, None] * vy + poses[:, 2][:, None]
    out = np.empty(cx.shape + (3,))
    out[..., 0] = k.f * cx + k.W / 2 * cz
    out[..., 1] = k.f * cy + k.H / 2 * cz
    out[..., 2] = cz
    return out


def normalized_points(hom: np.ndarray) -> np.ndarray:
    """Image-plane points (px/pz, py/pz) from homogeneous projections."""
    return hom[..., :2] / hom[..., 2:3]


def visibility_mask(
    verts: np.ndarray, poses: np.ndarray, k: CameraIntrinsics, rounding: str = "floor"
) -> np.ndarray:
    """Per-pose flag: every vertex in front of the camera and on a valid pixel."""
    hom = project_vertices(verts, poses, k)
    depth_ok = np.all(hom[..., 2] > 0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = normalized_points(hom)
    if rounding == "nearest":
        uv = uv + 0.5
    pix = np.floor(uv)
    in_x = (pix[..., 0] >= 1) & (pix[..., 0] <= k.W)
    in_y = (pix[..., 1] >= 1) & (pix[..., 1] <= k.H)
    return depth_ok & np.all(in_x & in_y, axis=1)


def visibility_check(t, q: Sequence[float], k: CameraIntrinsics, rounding: str = "floor") -> bool:
    verts, _ = t.vertex_array()
    return bool(visibility_mask(verts, np.asarray(q, dtype=np.float64)[None, :], k, rounding)[0])


def pose_norm(d: np.ndarray, weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted L-infinity norm over the last axis."""
    d = np.asarray(d, dtype=np.float64)
    w = np.ones(6) if weights is None else np.asarray(weights, dtype=np.float64)
    return np.max(np.abs(d) * w, axis=-1)
