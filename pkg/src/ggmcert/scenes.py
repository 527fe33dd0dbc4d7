"""Synthetic scene ingredients: bounded pixel noise and planar clutter."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .bitimage import BitImage
from .camera import CameraIntrinsics
from .raster import Renderer
from .target import make_target


class ClutterConstraintError(RuntimeError):
    pass


def noise_flip_count(nbar: float) -> int:
    if nbar < 0:
        raise ValueError("noise budget must be non-negative")
    return int(math.floor(nbar * nbar + 1e-12))


def gen_noise(img: BitImage, nbar: float, rng: np.random.Generator, count: int | None = None) -> BitImage:
    """Flip ``count`` (default floor(nbar^2)) distinct uniformly chosen pixels."""
    limit = noise_flip_count(nbar)
    n = limit if count is None else int(count)
    if not 0 <= n <= limit:
        raise ValueError(f"cannot flip {n} pixels under noise budget {nbar} (at most {limit})")
    n = min(n, img.bits.size)
    flat = img.bits.ravel().copy()
    if n:
        flat[rng.choice(flat.size, size=n, replace=False)] ^= True
    return BitImage(flat.reshape(img.shape))


@dataclass
class ClutterSpec:
    """Random convex polygons lying in the target plane.

    Each object is a regular-ish polygon with ``vertices`` corners, a radius
    drawn from ``size`` (meters) and a centre drawn from the ``region``
    rectangle (xmin, xmax, ymin, ymax) of the target plane, excluding the
    ``keep_out`` rectangle when given.
    """

    count: tuple[int, int] = (1, 4)
    size: tuple[float, float] = (0.03, 0.08)
    vertices: tuple[int, int] = (3, 6)
    region: tuple[float, float, float, float] = (-1.0, 1.0, -0.8, 0.8)
    keep_out: tuple[float, float, float, float] | None = None
    retries: int = 200

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClutterSpec":
        d = dict(d)
        for key in ("count", "size", "vertices", "region", "keep_out"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def random_convex_polygon(rng: np.random.Generator, spec: ClutterSpec) -> list[tuple[float, float]]:
    m = int(rng.integers(spec.vertices[0], spec.vertices[1] + 1))
    r = float(rng.uniform(*spec.size))
    for _ in range(1000):
        cx = float(rng.uniform(spec.region[0], spec.region[1]))
        cy = float(rng.uniform(spec.region[2], spec.region[3]))
        ko = spec.keep_out
        if ko is None or not (ko[0] - r <= cx <= ko[1] + r and ko[2] - r <= cy <= ko[3] + r):
            break
    else:
        raise ClutterConstraintError("could not place a clutter object outside the keep-out rectangle")
    # sorted angles with bounded jitter keep the polygon strictly convex and CCW
    base = float(rng.uniform(0, 2 * math.pi))
    ang = base + (np.arange(m) + rng.uniform(-0.3, 0.3, size=m)) * 2 * math.pi / m
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in ang]


def render_clutter(polys: Sequence[Sequence[tuple[float, float]]], q, k: CameraIntrinsics) -> BitImage:
    if not polys:
        return BitImage.zeros(k.W, k.H)
    t = make_target("clutter", polys)
    r = Renderer(t, k, strict=False)
    imgs, ok = r.render(np.asarray(q, dtype=np.float64)[None])
    return BitImage(imgs[0]) if ok[0] else BitImage.zeros(k.W, k.H)


def gen_clutter(
    spec: ClutterSpec,
    k: CameraIntrinsics,
    rng: np.random.Generator,
    q,
    masks: Sequence[BitImage] = (),
    nbar: float | None = None,
) -> tuple[BitImage, list]:
    """Render random clutter seen from pose q; optionally keep intrusion into every mask <= nbar.

    Objects violating the intrusion bound are redrawn, at most ``spec.retries``
    times in total.  Returns the clutter image and the accepted polygons.
    """
    n = int(rng.integers(spec.count[0], spec.count[1] + 1))
    polys: list = []
    img = BitImage.zeros(k.W, k.H)
    retries = 0
    mask_bits = [getattr(m, "image", m).bits for m in masks]
    while len(polys) < n:
        cand = polys + [random_convex_polygon(rng, spec)]
        cimg = render_clutter(cand, q, k)
        if nbar is not None and any(math.sqrt(np.count_nonzero(cimg.bits & mb)) > nbar for mb in mask_bits):
            retries += 1
            if retries > spec.retries:
                raise ClutterConstraintError(f"clutter intrusion bound {nbar} unsatisfiable after {spec.retries} retries")
            continue
        polys, img = cand, cimg
    return img, polys
