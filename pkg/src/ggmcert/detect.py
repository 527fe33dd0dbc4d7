"""Certified detection, spatial-filter masks, partitions and the cluttered pipeline."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bitimage import BitImage, hamming, pack_batch
from .camera import CameraIntrinsics, PoseBox, pose_norm
from .certify import CertificateBundle
from .encoder import MlpEncoder
from .reach import GridReach, forward_reach_grid, grid_sample
from .target import TargetModel


def default_threshold(L_D: float, h, weights: Sequence[float] | None = None, nbar: float = 0.0) -> float:
    """tau = L_D * ||h||_w + nbar, the smallest threshold the completeness argument allows."""
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (6,))
    w = np.ones(6) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(L_D * np.max(w * h) + nbar)


@dataclass
class Detection:
    flag: bool
    pose: np.ndarray | None = None  # encoder estimate, present iff flag
    cell_id: int | None = None
    distance: float | None = None  # image-norm distance of the match
    matched_pose: np.ndarray | None = None
    candidates: int = 0
    diagnostic: str | None = None

    def to_dict(self) -> dict:
        return {
            "flag": self.flag,
            "pose": None if self.pose is None else [float(v) for v in self.pose],
            "cell_id": self.cell_id,
            "distance": self.distance,
            "matched_pose": None if self.matched_pose is None else [float(v) for v in self.matched_pose],
            "candidates": self.candidates,
            "diagnostic": self.diagnostic,
        }


class Detector:
    """Certified detector over one pose box with a cached image lattice.

    The grid of step ``h`` over the box is decoded once; each call to
    :meth:`detect` restricts it to the weighted ball of radius ``cert.radius``
    around the encoder estimate and searches for a lattice image within
    ``tau`` (image norm) of the input, nearest candidate pose first.
    """

    def __init__(
        self,
        target: TargetModel,
        camera: CameraIntrinsics,
        box: PoseBox,
        encoder: MlpEncoder,
        cert: CertificateBundle,
        h,
        tau: float | None = None,
        weights: Sequence[float] | None = None,
        strict: bool = True,
        cell_id: int | None = None,
        grid_reach: GridReach | None = None,
        check_step: bool = True,
    ):
        self.target = target
        self.camera = camera
        self.box = box
        self.encoder = encoder
        self.cert = cert
        self.weights = np.asarray(cert.pose_weights if weights is None else weights, dtype=np.float64)
        self.cell_id = cell_id
        if grid_reach is None:
            grid = grid_sample(box, h, cert.L_D if check_step else None, self.weights)
            grid_reach = forward_reach_grid(target, grid, camera, strict)
        self.grid_reach = grid_reach
        self.h = grid_reach.grid.step
        self.tau = default_threshold(cert.L_D, self.h, self.weights, cert.nbar) if tau is None else float(tau)
        grid = grid_reach.grid
        self._ids = grid_reach.image_ids.reshape(tuple(grid.counts))
        # lattice coordinates per dimension (clamped to the box like PoseGrid poses)
        self._coords = [np.minimum(grid.origin[d] + np.arange(grid.counts[d]) * grid.step[d], grid.upper[d]) for d in range(6)]
        self._packed = pack_batch(grid_reach.reach.images())

    @property
    def radius(self) -> float:
        return self.cert.radius

    @property
    def reach(self):
        return self.grid_reach.reach

    def mask(self) -> "Mask":
        return Mask(self.reach.union(), self.cell_id, self.h.tolist())

    def estimate(self, img: BitImage) -> np.ndarray:
        return self.encoder.predict(img.bits[None].astype(np.float64))[0]

    def detect(self, img: BitImage, tau: float | None = None, estimate: np.ndarray | None = None) -> Detection:
        tau = self.tau if tau is None else float(tau)
        q_hat = self.estimate(img) if estimate is None else np.asarray(estimate, dtype=np.float64)
        if len(self._packed) == 0:
            return Detection(False, cell_id=self.cell_id, diagnostic="no visible grid pose in the box")
        # the weighted L-infinity ball is a product of per-dimension intervals,
        # so its intersection with the lattice is an index sub-box
        per_dim = [np.abs(c - q_hat[d]) * self.weights[d] for d, c in enumerate(self._coords)]
        slices = []
        for dd in per_dim:
            inside = np.flatnonzero(dd <= self.radius)
            if len(inside) == 0:
                gap = max(float(x.min()) for x in per_dim)
                return Detection(
                    False,
                    cell_id=self.cell_id,
                    diagnostic=f"empty candidate ball: estimate is {gap:.6g} from the box, radius {self.radius:.6g}",
                )
            slices.append(slice(int(inside[0]), int(inside[-1]) + 1))
        sub = self._ids[tuple(slices)]
        visible = sub >= 0
        n_cand = int(visible.sum())
        if n_cand == 0:
            return Detection(False, cell_id=self.cell_id, diagnostic="no visible grid pose in the candidate ball")
        present = np.zeros(len(self._packed), dtype=bool)
        present[sub[visible]] = True
        cand_ids = np.flatnonzero(present)
        one = pack_batch(img.bits[None])[0]
        dist = np.full(len(self._packed), np.inf)
        dist[cand_ids] = np.sqrt(hamming(self._packed[cand_ids], one).astype(np.float64))
        good = dist <= tau
        hit = visible & good[np.where(visible, sub, 0)]
        if not hit.any():
            return Detection(False, cell_id=self.cell_id, candidates=n_cand)
        # first match in order of increasing distance from the estimate (ties: lattice order)
        idx = np.argwhere(hit)
        dq = np.zeros(len(idx))
        for d, sl in enumerate(slices):
            dq = np.maximum(dq, per_dim[d][sl][idx[:, d]])
        j = int(np.argmin(dq))
        full = tuple(int(sl.start + i) for sl, i in zip(slices, idx[j]))
        matched = np.array([self._coords[d][full[d]] for d in range(6)])
        return Detection(
            True,
            pose=q_hat,
            cell_id=self.cell_id,
            distance=float(dist[sub[tuple(idx[j])]]),
            matched_pose=matched,
            candidates=n_cand,
        )


def detect(
    img: BitImage,
    box: PoseBox,
    e: MlpEncoder,
    cert: CertificateBundle,
    tau: float | None,
    h,
    target: TargetModel,
    camera: CameraIntrinsics,
) -> Detection:
    """One-shot detection; build a :class:`Detector` to reuse the lattice across images."""
    return Detector(target, camera, box, e, cert, h, tau).detect(img)


# -- masks and partitions ------------------------------------------------------


@dataclass
class Mask:
    image: BitImage
    cell_id: int | None
    step: list[float]

    def to_dict(self) -> dict:
        return {"cell_id": self.cell_id, "step": self.step, "pixels": self.image.count()}


def build_mask(cell: PoseBox, t: TargetModel, k: CameraIntrinsics, h, lipschitz: float | None = None,
               weights: Sequence[float] | None = None, cell_id: int | None = None, strict: bool = True) -> Mask:
    grid = grid_sample(cell, h, lipschitz, weights)
    gr = forward_reach_grid(t, grid, k, strict)
    return Mask(gr.reach.union(), cell_id, grid.step.tolist())


@dataclass
class Partition:
    parent: PoseBox
    cells: list[PoseBox]

    def __post_init__(self):
        if not self.cells:
            raise ValueError("partition needs at least one cell")
        for c in self.cells:
            if np.any(c.lower < self.parent.lower - 1e-12) or np.any(c.upper > self.parent.upper + 1e-12):
                raise ValueError("cell outside the parent box")
        for a, b in itertools.combinations(range(len(self.cells)), 2):
            ca, cb = self.cells[a], self.cells[b]
            overlap = np.minimum(ca.upper, cb.upper) - np.maximum(ca.lower, cb.lower)
            free = self.parent.span > 0
            if np.all(overlap[free] > 1e-12):
                raise ValueError(f"cells {a} and {b} overlap")
        free = self.parent.span > 0
        vol = sum(float(np.prod(c.span[free])) for c in self.cells)
        if not np.isclose(vol, float(np.prod(self.parent.span[free])), rtol=1e-9, atol=0.0):
            raise ValueError("cells do not cover the parent box")

    @property
    def K(self) -> int:
        return len(self.cells)

    def cell_of(self, q) -> int | None:
        for i, c in enumerate(self.cells):
            if c.contains(q):
                return i
        return None

    def to_dict(self) -> dict:
        return {"parent": self.parent.to_dict(), "cells": [c.to_dict() for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(PoseBox.from_dict(d["parent"]), [PoseBox.from_dict(c) for c in d["cells"]])


def make_partition(parent: PoseBox, divisions: Sequence[int]) -> Partition:
    """Split every dimension i of the parent box into divisions[i] equal slabs."""
    div = np.asarray(divisions, dtype=np.int64)
    if div.shape != (6,) or np.any(div < 1):
        raise ValueError("divisions must be six positive integers")
    if np.any((parent.span == 0) & (div > 1)):
        raise ValueError("cannot divide a zero-width dimension")
    edges = [np.linspace(parent.lower[d], parent.upper[d], div[d] + 1) for d in range(6)]
    cells = []
    for idx in itertools.product(*(range(n) for n in div)):
        lo = [edges[d][i] for d, i in enumerate(idx)]
        hi = [edges[d][i + 1] for d, i in enumerate(idx)]
        cells.append(PoseBox(lo, hi))
    return Partition(parent, cells)


def _row_keys(packed: np.ndarray, salt: np.ndarray) -> np.ndarray:
    """Vectorised 64-bit row fingerprints of uint64 word rows (collisions are confirmed exactly)."""
    with np.errstate(over="ignore"):
        x = packed * salt[None, :]
        x ^= x >> np.uint64(29)
        return np.bitwise_xor.reduce(x * np.uint64(0xBF58476D1CE4E5B9), axis=1)


@dataclass
class PartitionReport:
    valid: list[bool]
    violations: int
    witnesses: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.valid)

    def to_dict(self) -> dict:
        return {"valid": self.valid, "ok": self.ok, "violations": self.violations, "witnesses": self.witnesses}


def validate_partition(
    p: Partition,
    t: TargetModel,
    k: CameraIntrinsics,
    h,
    reaches: Sequence[GridReach] | None = None,
    masks: Sequence[Mask] | None = None,
    max_witnesses: int = 20,
    strict: bool = True,
) -> PartitionReport:
    """Exclusion check: for i != j and I' in Reach(cell j), I' AND Mask_i is not in Reach(cell i)."""
    if reaches is None:
        reaches = [forward_reach_grid(t, grid_sample(c, h), k, strict) for c in p.cells]
    if masks is None:
        masks = [Mask(r.reach.union(), i, r.grid.step.tolist()) for i, r in enumerate(reaches)]
    packed = [pack_batch(r.reach.images()) for r in reaches]
    nwords = packed[0].shape[1] if packed and packed[0].ndim == 2 else 0
    salt = np.random.default_rng(0x5EED).integers(1, 2**63, size=nwords, dtype=np.uint64) | np.uint64(1)
    keys = [_row_keys(pk, salt) for pk in packed]
    mask_words = [pack_batch(m.image.bits[None])[0] for m in masks]
    bad = np.zeros(p.K, dtype=bool)
    violations = 0
    witnesses: list[dict] = []
    for i in range(p.K):
        if len(packed[i]) == 0:
            continue
        order = np.argsort(keys[i], kind="stable")
        sorted_keys = keys[i][order]
        for j in range(p.K):
            if i == j or len(packed[j]) == 0:
                continue
            filt = packed[j] & mask_words[i][None, :]
            fk = _row_keys(filt, salt)
            pos = np.searchsorted(sorted_keys, fk)
            pos_c = np.minimum(pos, len(sorted_keys) - 1)
            maybe = np.flatnonzero(sorted_keys[pos_c] == fk)
            for r in maybe:
                s = pos[r]
                while s < len(sorted_keys) and sorted_keys[s] == fk[r]:
                    if np.array_equal(packed[i][order[s]], filt[r]):
                        violations += 1
                        bad[i] = True
                        if len(witnesses) < max_witnesses:
                            witnesses.append(
                                {
                                    "cell_i": i,
                                    "cell_j": j,
                                    "pose_j": [float(v) for v in reaches[j].reach.poses[r]],
                                    "pose_i": [float(v) for v in reaches[i].reach.poses[order[s]]],
                                }
                            )
                        break
                    s += 1
    return PartitionReport([not b for b in bad], violations, witnesses)


# -- filtering and the cluttered pipeline --------------------------------------


def _mask_image(m) -> BitImage:
    return m.image if isinstance(m, Mask) else m


def apply_filter(img: BitImage, m) -> BitImage:
    mi = _mask_image(m)
    if img.shape != mi.shape:
        raise ValueError(f"image {img.shape} and mask {mi.shape} differ in size")
    return img & mi


def clutter_intrusion(clutter_img: BitImage, m) -> float:
    return apply_filter(clutter_img, m).norm()


SELECTION_STRATEGIES = ("all", "nearest-to-prior", "max-match-quality")


def select(
    detections: Sequence[Detection],
    criteria: str = "all",
    prior=None,
    weights: Sequence[float] | None = None,
) -> list[Detection]:
    dets = [d for d in detections if d.flag]
    if criteria not in SELECTION_STRATEGIES:
        raise ValueError(f"unknown selection strategy {criteria!r}; expected one of {SELECTION_STRATEGIES}")
    if criteria == "all" or not dets:
        return list(dets)
    if criteria == "nearest-to-prior":
        if prior is None:
            raise ValueError("nearest-to-prior needs a prior pose")
        w = np.ones(6) if weights is None else np.asarray(weights, dtype=np.float64)
        dist = [float(pose_norm(np.asarray(d.pose) - np.asarray(prior, dtype=np.float64), w)) for d in dets]
        return [dets[int(np.argmin(dist))]]
    return [dets[int(np.argmin([d.distance for d in dets]))]]


def cluttered_detect(
    img: BitImage,
    partition: Partition,
    masks: Sequence[Mask],
    detectors: Sequence[Detector],
    selection: str = "all",
    prior=None,
) -> list[Detection]:
    if not (len(masks) == len(detectors) == partition.K):
        raise ValueError("need one mask and one detector per cell")
    found = []
    for i, (m, det) in enumerate(zip(masks, detectors)):
        d = det.detect(apply_filter(img, m))
        d.cell_id = i
        if d.flag:
            found.append(d)
    return select(found, selection, prior, detectors[0].weights if detectors else None)
