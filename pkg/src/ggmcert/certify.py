"""Worst-case pose error certificates and the quantities they are built from."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .camera import CameraIntrinsics, PoseBox, pose_norm
from .raster import renderer
from .reach import grid_sample
from .target import TargetModel, serialize_target

IMAGE_NORM = "l2-binary (sqrt of differing pixel count)"


def _round_up(x: float) -> float:
    return math.nextafter(x, math.inf) if x > 0 else x


def _add_up(a: float, b: float) -> float:
    s = a + b
    # fsum recovers the exact rounding error of a + b
    return s if math.fsum((s, -a, -b)) >= 0 else _round_up(s)


def _mul_up(a: float, b: float) -> float:
    return _round_up(a * b)


def certified_bound(eta: float, delta: float, L_D: float, L_E: float, eps: float) -> float:
    """(delta + eta)(L_D L_E + 1) + eps with every operation rounded upward.

    The result is never below the exact value of the formula on the given
    float inputs.
    """
    for name, v in (("eta", eta), ("delta", delta), ("L_D", L_D), ("L_E", L_E), ("eps", eps)):
        if v < 0 or not math.isfinite(v):
            raise ValueError(f"{name} must be a finite non-negative number, got {v}")
    gain = _add_up(_mul_up(L_D, L_E), 1.0)
    return _add_up(_mul_up(_add_up(delta, eta), gain), eps)


def noisy_bound(eta: float, delta: float, L_D: float, L_E: float, eps: float, nbar: float) -> float:
    if nbar < 0:
        raise ValueError("noise budget must be non-negative")
    clean = certified_bound(eta, delta, L_D, L_E, eps)
    if nbar == 0:
        return clean
    return _add_up(clean, _mul_up(L_E, nbar))


@dataclass
class CertificateBundle:
    eta: float
    delta: float
    L_D: float
    L_E: float
    eps: float
    nbar: float = 0.0
    L_D_provenance: str = "empirical"  # or "analytic"
    L_D_safety: float | None = 2.0
    pose_weights: list[float] = field(default_factory=lambda: [1.0] * 6)
    image_norm: str = IMAGE_NORM
    pose_norm: str = "weighted L-infinity"
    covering: str = "grid step eta used as the covering radius (conservative)"
    scenario_hash: str | None = None

    @property
    def conditional(self) -> bool:
        return self.L_D_provenance != "analytic"

    @property
    def bound(self) -> float:
        return certified_bound(self.eta, self.delta, self.L_D, self.L_E, self.eps)

    @property
    def noisy(self) -> float:
        return noisy_bound(self.eta, self.delta, self.L_D, self.L_E, self.eps, self.nbar)

    @property
    def radius(self) -> float:
        return self.noisy if self.nbar > 0 else self.bound

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            bound=self.bound,
            noisy_bound=self.noisy,
            radius=self.radius,
            conditional=self.conditional,
            L_D_times_L_E=self.L_D * self.L_E,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CertificateBundle":
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in keys})


def scenario_hash(t: TargetModel, k: CameraIntrinsics, box: PoseBox, seeds: dict | Sequence[int]) -> str:
    payload = {
        "target": serialize_target(t),
        "camera": k.to_dict(),
        "box": box.to_dict(),
        "seeds": seeds if isinstance(seeds, dict) else list(seeds),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class LipschitzEstimate:
    value: float
    raw_max: float
    safety: float
    pairs: int
    worst_pair: tuple[list[float], list[float]] | None
    provenance: str = "empirical"


def estimate_decoder_lipschitz(
    t: TargetModel,
    box: PoseBox,
    k: CameraIntrinsics,
    samples: int = 2000,
    safety: float = 2.0,
    weights: Sequence[float] | None = None,
    neighbor_step=None,
    seed: int = 0,
    strict: bool = True,
) -> LipschitzEstimate:
    """Safety factor times the largest sampled ratio ||D(q1) - D(q2)|| / ||q1 - q2||.

    Pairs are (a) grid neighbours: random base poses on a lattice of step
    ``neighbor_step`` (default span / 32) paired with the next lattice point
    along each free dimension, and (b) uniformly random pose pairs.  Pairs
    where the decoder is undefined (target not visible) are skipped.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples")
    free = box.free_dims
    if len(free) == 0:
        raise ValueError("degenerate box: no free dimension")
    w = np.ones(6) if weights is None else np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)
    span = box.span
    step = span / 32 if neighbor_step is None else np.broadcast_to(np.asarray(neighbor_step, dtype=np.float64), (6,))
    a_list, b_list = [], []
    n_base = max(1, samples // (len(free) + 1))
    for d in free:
        base = box.sample(rng, n_base)
        # snap base poses to the lattice and keep their neighbour in the box
        steps_avail = np.floor(span[d] / step[d]) if step[d] > 0 else 0
        if steps_avail < 1:
            continue
        kidx = rng.integers(0, int(steps_avail), size=n_base)
        base[:, d] = box.lower[d] + kidx * step[d]
        nb = base.copy()
        nb[:, d] = base[:, d] + step[d]
        a_list.append(base)
        b_list.append(nb)
    n_rand = max(1, samples - n_base * len(free))
    a_list.append(box.sample(rng, n_rand))
    b_list.append(box.sample(rng, n_rand))
    qa = np.concatenate(a_list)
    qb = np.concatenate(b_list)
    r = renderer(t, k, strict)
    ia, oka = r.render(qa)
    ib, okb = r.render(qb)
    ok = oka & okb
    diff = np.count_nonzero((ia ^ ib).reshape(len(qa), -1), axis=1)
    dist = pose_norm(qa - qb, w)
    ok &= dist > 0
    ratio = np.zeros(len(qa))
    ratio[ok] = np.sqrt(diff[ok]) / dist[ok]
    if not ok.any():
        return LipschitzEstimate(0.0, 0.0, safety, 0, None)
    i = int(np.argmax(ratio))
    raw = float(ratio[i])
    return LipschitzEstimate(
        safety * raw, raw, safety, int(ok.sum()), (qa[i].tolist(), qb[i].tolist()) if raw > 0 else None
    )


@dataclass
class DeltaAudit:
    delta: float
    groups: int
    grid_poses: int
    worst_pair: tuple[list[float], list[float]] | None
    symmetric_dims: list[int]


def delta_audit_images(poses: np.ndarray, images: np.ndarray, weights: Sequence[float] | None = None) -> DeltaAudit:
    """Largest weighted L-infinity diameter among poses sharing a bit-identical image."""
    w = np.ones(6) if weights is None else np.asarray(weights, dtype=np.float64)
    n = len(poses)
    if n == 0:
        return DeltaAudit(0.0, 0, 0, None, [])
    packed = np.packbits(images.reshape(n, -1), axis=1)
    keys = [hashlib.blake2b(row.tobytes(), digest_size=16).digest() for row in packed]
    groups: dict[bytes, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    best, worst, worst_dims = 0.0, None, []
    for members in groups.values():
        if len(members) < 2:
            continue
        # hash groups are confirmed bit-exactly before use
        ref = packed[members[0]]
        same = [m for m in members if np.array_equal(packed[m], ref)]
        if len(same) < 2:
            continue
        g = poses[same]
        lo, hi = g.min(axis=0), g.max(axis=0)
        diam = float(np.max((hi - lo) * w))
        if diam > best:
            best = diam
            d = int(np.argmax((hi - lo) * w))
            worst = (g[np.argmin(g[:, d])].tolist(), g[np.argmax(g[:, d])].tolist())
            worst_dims = [int(j) for j in np.nonzero((hi - lo) * w >= 0.5 * diam)[0]]
    return DeltaAudit(best, len(groups), n, worst, worst_dims)


def delta_audit(
    t: TargetModel,
    box: PoseBox,
    k: CameraIntrinsics,
    h_audit,
    weights: Sequence[float] | None = None,
    strict: bool = True,
) -> DeltaAudit:
    grid = grid_sample(box, h_audit)
    poses = grid.poses()
    imgs, ok = renderer(t, k, strict).render(poses)
    return delta_audit_images(poses[ok], imgs[ok], weights)
