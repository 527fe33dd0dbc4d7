"""Digital stage of the decoder: convex-polygon sign test, composition, decode.

A pixel (qx, qy) is inside a projected convex polygon when the cross terms of
all its edges (closing edge included) share one sign; a zero term agrees with
either sign, so boundary pixels are inside.  Vertices are used unquantized.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numba
import numpy as np

from .bitimage import BitImage
from .camera import CameraIntrinsics, InvisiblePointError, normalized_points, project_vertices, visibility_mask
from .target import BinOp, Expr, Leaf, Not, TargetModel


class InvisiblePolygonError(InvisiblePointError):
    pass


def cross_term(pi: Sequence[float], pj: Sequence[float], pixel: Sequence[float]) -> float:
    """Cross product (pj - pi) x (pixel - pi), expanded to be linear in the pixel."""
    pix, piy = pi
    pjx, pjy = pj
    qx, qy = pixel
    return qy * (pjx - pix) - qx * (pjy - piy) + (pix * pjy - pjx * piy)


def inside_test(points: Sequence[Sequence[float]], pixel: Sequence[float]) -> int:
    pos = neg = False
    n = len(points)
    for i in range(n):
        c = cross_term(points[i], points[(i + 1) % n], pixel)
        if c > 0:
            pos = True
        elif c < 0:
            neg = True
    return 0 if (pos and neg) else 1


def project_polygon(poly, q: Sequence[float], k: CameraIntrinsics) -> np.ndarray:
    """ProjectedPolygon: (m, 2) array of (px/pz, py/pz) per vertex."""
    verts = np.asarray(poly, dtype=np.float64)
    hom = project_vertices(verts, np.asarray(q, dtype=np.float64)[None, :], k)[0]
    if np.any(hom[:, 2] <= 0):
        raise InvisiblePolygonError("polygon has a vertex at non-positive depth")
    return normalized_points(hom)


def rasterize_points(points: np.ndarray, W: int, H: int) -> np.ndarray:
    """Full-image vectorized sign test for one projected polygon -> (H, W) bool."""
    qx = np.arange(1, W + 1, dtype=np.float64)[None, :]
    qy = np.arange(1, H + 1, dtype=np.float64)[:, None]
    pos = np.zeros((H, W), dtype=bool)
    neg = np.zeros((H, W), dtype=bool)
    n = len(points)
    for i in range(n):
        pix, piy = points[i]
        pjx, pjy = points[(i + 1) % n]
        c = qy * (pjx - pix) - qx * (pjy - piy) + (pix * pjy - pjx * piy)
        pos |= c > 0
        neg |= c < 0
    return ~(pos & neg)


def rasterize_polygon(poly, q: Sequence[float], k: CameraIntrinsics) -> BitImage:
    return BitImage(rasterize_points(project_polygon(poly, q, k), k.W, k.H))


# ---------------------------------------------------------------------------
# composition


def compose(expr: Expr, imgs: Sequence[BitImage]) -> BitImage:
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise ValueError(f"images have different dimensions: {sorted(shapes)}")

    def ev(e: Expr) -> BitImage:
        if isinstance(e, Leaf):
            return imgs[e.index - 1]
        if isinstance(e, Not):
            return ~ev(e.child)
        a, b = ev(e.left), ev(e.right)
        if e.op == "|":
            return a | b
        if e.op == "&":
            return a & b
        return a ^ b

    return ev(expr)


PUSH, NOT, OR, AND, XOR = 0, 1, 2, 3, 4
_OPCODES = {"|": OR, "&": AND, "^": XOR}


def compile_expression(expr: Expr) -> np.ndarray:
    """Postfix program of (opcode, polygon index) pairs for the batch kernel."""
    prog: list[tuple[int, int]] = []

    def emit(e: Expr):
        if isinstance(e, Leaf):
            prog.append((PUSH, e.index - 1))
        elif isinstance(e, Not):
            emit(e.child)
            prog.append((NOT, 0))
        else:
            emit(e.left)
            emit(e.right)
            prog.append((_OPCODES[e.op], 0))

    emit(expr)
    return np.array(prog, dtype=np.int64).reshape(-1, 2)


def _stack_depth(prog: np.ndarray) -> int:
    depth = best = 0
    for op, _ in prog:
        depth += 1 if op == PUSH else (0 if op == NOT else -1)
        best = max(best, depth)
    return best


# ---------------------------------------------------------------------------
# batch kernel


@numba.njit(cache=True, nogil=True)
def _render_one(pts, offsets, prog, H, W, polybuf, stack, out):
    npoly = offsets.shape[0] - 1
    for p in range(npoly):
        buf = polybuf[p]
        buf[:, :] = False
        s, e = offsets[p], offsets[p + 1]
        xmin = pts[s, 0]
        xmax = pts[s, 0]
        ymin = pts[s, 1]
        ymax = pts[s, 1]
        for i in range(s + 1, e):
            xmin = min(xmin, pts[i, 0])
            xmax = max(xmax, pts[i, 0])
            ymin = min(ymin, pts[i, 1])
            ymax = max(ymax, pts[i, 1])
        # one extra pixel of margin on each side: the sign test, not the
        # bounding box, decides membership
        x0 = max(1.0, np.floor(xmin) - 1.0)
        x1 = min(float(W), np.ceil(xmax) + 1.0)
        y0 = max(1.0, np.floor(ymin) - 1.0)
        y1 = min(float(H), np.ceil(ymax) + 1.0)
        if x0 > x1 or y0 > y1:
            continue
        for iy in range(int(y0), int(y1) + 1):
            qy = float(iy)
            for ix in range(int(x0), int(x1) + 1):
                qx = float(ix)
                pos = False
                neg = False
                for i in range(s, e):
                    j = i + 1 if i + 1 < e else s
                    pix = pts[i, 0]
                    piy = pts[i, 1]
                    pjx = pts[j, 0]
                    pjy = pts[j, 1]
                    c = qy * (pjx - pix) - qx * (pjy - piy) + (pix * pjy - pjx * piy)
                    if c > 0.0:
                        pos = True
                    elif c < 0.0:
                        neg = True
                    if pos and neg:
                        break
                if not (pos and neg):
                    buf[iy - 1, ix - 1] = True
    sp = 0
    for k in range(prog.shape[0]):
        op = prog[k, 0]
        if op == 0:
            stack[sp, :, :] = polybuf[prog[k, 1]]
            sp += 1
        elif op == 1:
            a = stack[sp - 1]
            for r in range(H):
                for c2 in range(W):
                    a[r, c2] = not a[r, c2]
        else:
            a = stack[sp - 2]
            b = stack[sp - 1]
            for r in range(H):
                for c2 in range(W):
                    if op == 2:
                        a[r, c2] = a[r, c2] or b[r, c2]
                    elif op == 3:
                        a[r, c2] = a[r, c2] and b[r, c2]
                    else:
                        a[r, c2] = a[r, c2] != b[r, c2]
            sp -= 1
    out[:, :] = stack[0]


@numba.njit(cache=True, nogil=True)
def _render_batch(pts, valid, offsets, prog, depth, H, W, out):
    npoly = offsets.shape[0] - 1
    polybuf = np.zeros((npoly, H, W), dtype=np.bool_)
    stack = np.zeros((depth, H, W), dtype=np.bool_)
    for b in range(pts.shape[0]):
        if valid[b]:
            _render_one(pts[b], offsets, prog, H, W, polybuf, stack, out[b])


class Renderer:
    """Batch decoder for one target and camera.

    ``strict=True`` requires the whole target to be visible (every vertex on a
    valid pixel); ``strict=False`` clips at the image border but still
    requires every vertex in front of the camera.
    """

    def __init__(self, target: TargetModel, camera: CameraIntrinsics, strict: bool = True, rounding: str = "floor"):
        self.target = target
        self.camera = camera
        self.strict = strict
        self.rounding = rounding
        self.verts, self.offsets = target.vertex_array()
        self.program = compile_expression(target.composition)
        self.depth = _stack_depth(self.program)

    def valid(self, poses: np.ndarray) -> np.ndarray:
        poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
        if self.strict:
            return visibility_mask(self.verts, poses, self.camera, self.rounding)
        hom = project_vertices(self.verts, poses, self.camera)
        return np.all(hom[..., 2] > 0, axis=1)

    def render(self, poses: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """Images (N, H, W) bool and a validity flag per pose (invalid -> all zero)."""
        poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
        k = self.camera
        out = np.zeros((len(poses), k.H, k.W), dtype=bool)
        ok = np.zeros(len(poses), dtype=bool)
        for s in range(0, len(poses), chunk):
            q = poses[s : s + chunk]
            hom = project_vertices(self.verts, q, k)
            v = self.valid(q)
            with np.errstate(divide="ignore", invalid="ignore"):
                pts = np.ascontiguousarray(normalized_points(hom))
            _render_batch(pts, v, self.offsets, self.program, self.depth, k.H, k.W, out[s : s + chunk])
            ok[s : s + chunk] = v
        return out, ok

    def decode(self, q: Sequence[float]) -> BitImage:
        imgs, ok = self.render(np.asarray(q, dtype=np.float64)[None, :])
        if not ok[0]:
            if self.strict:
                raise InvisiblePolygonError(f"target not fully visible at pose {list(q)}")
            raise InvisiblePolygonError(f"target has a vertex behind the camera at pose {list(q)}")
        return BitImage._wrap(imgs[0])


@lru_cache(maxsize=64)
def renderer(target: TargetModel, camera: CameraIntrinsics, strict: bool = True, rounding: str = "floor") -> Renderer:
    return Renderer(target, camera, strict, rounding)


def decode(t: TargetModel, q: Sequence[float], k: CameraIntrinsics, strict: bool = True) -> BitImage:
    return renderer(t, k, strict).decode(q)


def decode_reference(t: TargetModel, q: Sequence[float], k: CameraIntrinsics) -> BitImage:
    """Unbatched decode: rasterize every polygon over the full image, then compose."""
    imgs = [rasterize_polygon(p, q, k) for p in t.polygons]
    return compose(t.composition, imgs)
