"""Forward reachable image sets by grid sampling the pose box."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .bitimage import BitImage
from .camera import CameraIntrinsics, PoseBox
from .raster import renderer
from .target import TargetModel

# relative slack when counting grid indices, so that e.g. [0, 0.3] with step
# 0.1 keeps its last point despite 0.3 / 0.1 < 3 in floating point
_INDEX_SLACK = 1e-9


class GridStepError(ValueError):
    def __init__(self, message: str, required: np.ndarray | None = None):
        super().__init__(message)
        self.required = required


def step_vector(h, box: PoseBox) -> np.ndarray:
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (6,)).copy()
    h[box.span == 0] = 0.0
    return h


def check_step(h: np.ndarray, box: PoseBox, lipschitz: float | None, weights: Sequence[float] | None = None) -> None:
    """Refuse steps whose weighted size is not below 1 / L_D on some free dimension."""
    free = box.span > 0
    if np.any(h[free] <= 0):
        raise GridStepError("grid step must be positive on every free dimension")
    if lipschitz is None or lipschitz <= 0:
        return
    w = np.ones(6) if weights is None else np.asarray(weights, dtype=np.float64)
    limit = 1.0 / lipschitz
    bad = free & (w * h >= limit)
    if np.any(bad):
        required = np.where(free, limit / np.where(w > 0, w, 1.0), 0.0)
        raise GridStepError(
            f"grid step {h.tolist()} violates h < 1/L_D = {limit:.6g} (weighted); "
            f"required per-dimension step below {required.tolist()}",
            required,
        )


@dataclass(frozen=True)
class PoseGrid:
    origin: np.ndarray  # (6,)
    step: np.ndarray  # (6,), zero on fixed dimensions
    counts: np.ndarray  # (6,) number of indices per dimension
    upper: np.ndarray  # (6,) box upper corner, used to clamp rounding overshoot

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def index_to_pose(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        return np.minimum(self.origin + idx * self.step, self.upper)

    def flat_to_index(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), tuple(self.counts)), axis=-1)

    def poses(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.size if stop is None else min(stop, self.size)
        return self.index_to_pose(self.flat_to_index(np.arange(start, stop)))

    def chunks(self, size: int = 65536) -> Iterator[tuple[int, np.ndarray]]:
        for s in range(0, self.size, size):
            yield s, self.poses(s, s + size)


def grid_sample(
    box: PoseBox, h, lipschitz: float | None = None, weights: Sequence[float] | None = None
) -> PoseGrid:
    """Grid origin + k * h over the box, lower corner included; zero-width dims give one index."""
    step = step_vector(h, box)
    check_step(step, box, lipschitz, weights)
    span = box.span
    counts = np.ones(6, dtype=np.int64)
    free = span > 0
    counts[free] = np.floor(span[free] / step[free] * (1 + _INDEX_SLACK) + _INDEX_SLACK).astype(np.int64) + 1
    return PoseGrid(box.lower.copy(), step, counts, box.upper.copy())


def _digest(row: np.ndarray) -> bytes:
    return hashlib.blake2b(row.tobytes(), digest_size=16).digest()


class ReachSet:
    """Distinct images (bit-exact) with a representative pose and a count each.

    Images are stored packed (row-major bits) in blocks.  With ``spill_dir``
    set, blocks beyond ``budget`` unique images are written to disk and
    memory-mapped back.
    """

    def __init__(self, width: int, height: int, budget: int | None = None, spill_dir: str | None = None, block: int = 4096):
        self.width = width
        self.height = height
        self.nbytes = (width * height + 7) // 8
        self.budget = budget
        self.spill_dir = spill_dir
        self.block = block
        self._blocks: list[np.ndarray] = []
        self._fill = 0
        self._index: dict[bytes, list[int]] = {}
        self.hashes: list[bytes] = []
        self.poses: list[np.ndarray] = []
        self.counts: list[int] = []
        self.spilled_blocks = 0

    def __len__(self) -> int:
        return len(self.counts)

    def _row(self, i: int) -> np.ndarray:
        return self._blocks[i // self.block][i % self.block]

    def _append(self, packed: np.ndarray) -> int:
        if not self._blocks or self._fill == self.block:
            self._maybe_spill()
            self._blocks.append(np.zeros((self.block, self.nbytes), dtype=np.uint8))
            self._fill = 0
        self._blocks[-1][self._fill] = packed
        self._fill += 1
        return len(self.counts)

    def _maybe_spill(self) -> None:
        if self.budget is None or self.spill_dir is None:
            return
        resident = sum(1 for b in self._blocks if not isinstance(b, np.memmap))
        if resident * self.block < self.budget:
            return
        for i, b in enumerate(self._blocks):
            if not isinstance(b, np.memmap):
                os.makedirs(self.spill_dir, exist_ok=True)
                path = os.path.join(self.spill_dir, f"block{i:06d}.npy")
                np.save(path, b)
                self._blocks[i] = np.load(path, mmap_mode="r")
                self.spilled_blocks += 1

    def add_packed(self, packed: np.ndarray, pose: np.ndarray) -> int:
        """Insert one packed image; returns its id (existing id on a duplicate)."""
        key = _digest(packed)
        bucket = self._index.get(key)
        if bucket is not None:
            for i in bucket:
                if np.array_equal(self._row(i), packed):
                    self.counts[i] += 1
                    return i
        i = self._append(packed)
        self._index.setdefault(key, []).append(i)
        self.hashes.append(key)
        self.poses.append(np.asarray(pose, dtype=np.float64).copy())
        self.counts.append(1)
        return i

    def add_images(self, images: np.ndarray, poses: np.ndarray) -> np.ndarray:
        packed = np.packbits(images.reshape(len(images), -1), axis=1)
        return np.array([self.add_packed(packed[i], poses[i]) for i in range(len(images))], dtype=np.int64)

    def lookup(self, img: BitImage) -> int | None:
        packed = np.frombuffer(img.packed(), dtype=np.uint8)
        for i in self._index.get(_digest(packed), []):
            if np.array_equal(self._row(i), packed):
                return i
        return None

    def __contains__(self, img: BitImage) -> bool:
        return self.lookup(img) is not None

    def packed(self) -> np.ndarray:
        """All unique images as an (N, nbytes) uint8 array."""
        if not self.counts:
            return np.zeros((0, self.nbytes), dtype=np.uint8)
        return np.concatenate([np.asarray(b) for b in self._blocks])[: len(self.counts)]

    def images(self) -> np.ndarray:
        p = self.packed()
        return np.unpackbits(p, axis=1)[:, : self.width * self.height].astype(bool).reshape(-1, self.height, self.width)

    def image(self, i: int) -> BitImage:
        bits = np.unpackbits(np.asarray(self._row(i)))[: self.width * self.height]
        return BitImage(bits.astype(bool).reshape(self.height, self.width))

    def union(self) -> BitImage:
        acc = np.zeros(self.nbytes, dtype=np.uint8)
        for b in self._blocks:
            acc |= np.bitwise_or.reduce(np.asarray(b), axis=0)
        bits = np.unpackbits(acc)[: self.width * self.height]
        return BitImage(bits.astype(bool).reshape(self.height, self.width))

    def image_set(self) -> set[bytes]:
        return {self._row(i).tobytes() for i in range(len(self))}

    # -- archive -------------------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "images.bin"), "wb") as fh:
            for i in range(len(self)):
                fh.write(np.array([self.width, self.height], dtype="<u4").tobytes())
                fh.write(np.asarray(self._row(i)).tobytes())
        index = {
            "width": self.width,
            "height": self.height,
            "images": [
                {"pose": [float(v) for v in self.poses[i]], "hash": self.hashes[i].hex(), "count": int(self.counts[i])}
                for i in range(len(self))
            ],
        }
        with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1)

    @classmethod
    def load(cls, directory: str) -> "ReachSet":
        with open(os.path.join(directory, "index.json"), encoding="utf-8") as fh:
            index = json.load(fh)
        rs = cls(index["width"], index["height"])
        rec = BitImage.raw_size(rs.width, rs.height)
        with open(os.path.join(directory, "images.bin"), "rb") as fh:
            data = fh.read()
        for n, entry in enumerate(index["images"]):
            packed = np.frombuffer(data, dtype=np.uint8, count=rs.nbytes, offset=n * rec + 8)
            if _digest(packed).hex() != entry["hash"]:
                raise ValueError(f"archive entry {n} does not match its recorded hash")
            i = rs.add_packed(packed, np.asarray(entry["pose"]))
            rs.counts[i] = int(entry["count"])
        return rs


@dataclass
class GridReach:
    """A reach set together with the image id of every grid pose."""

    grid: PoseGrid
    reach: ReachSet
    image_ids: np.ndarray  # (grid.size,), -1 where the target is not visible
    invisible: int


def forward_reach_grid(
    t: TargetModel,
    grid: PoseGrid,
    k: CameraIntrinsics,
    strict: bool = True,
    budget: int | None = None,
    spill_dir: str | None = None,
    chunk: int = 16384,
) -> GridReach:
    r = renderer(t, k, strict)
    rs = ReachSet(k.W, k.H, budget, spill_dir)
    ids = np.full(grid.size, -1, dtype=np.int64)
    invisible = 0
    for s, poses in grid.chunks(chunk):
        imgs, ok = r.render(poses)
        invisible += int((~ok).sum())
        if ok.any():
            ids[s : s + len(poses)][ok] = rs.add_images(imgs[ok], poses[ok])
    return GridReach(grid, rs, ids, invisible)


def forward_reach(
    t: TargetModel,
    box: PoseBox,
    k: CameraIntrinsics,
    h,
    lipschitz: float | None = None,
    weights: Sequence[float] | None = None,
    strict: bool = True,
    budget: int | None = None,
    spill_dir: str | None = None,
) -> ReachSet:
    grid = grid_sample(box, h, lipschitz, weights)
    return forward_reach_grid(t, grid, k, strict, budget, spill_dir).reach
