"""Fully connected pose regressor written directly in numpy.

The network maps a (optionally average-pooled) binary image to six sigmoid
outputs, which an affine head spreads over a pose box.  Training minimizes a
smooth-L1 loss in box-normalized coordinates with Adam, adds a penalty on the
product of layer spectral norms and clips every weight after each step.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .bitimage import BitImage
from .camera import CameraIntrinsics, Pose, PoseBox, pose_norm
from .raster import renderer
from .target import TargetModel

ACTIVATIONS = ("linear", "sigmoid")
# largest slope of each activation, used by the Lipschitz bound
ACTIVATION_SLOPE = {"linear": 1.0, "sigmoid": 0.25}


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpEncoder:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]
    box: PoseBox | None = None
    pool: int = 1
    image_shape: tuple[int, int] | None = None  # (H, W) before pooling
    pose_weights: np.ndarray = field(default_factory=lambda: np.ones(6))

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ValueError("weights, biases and activations must have one entry per layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("consecutive layer dimensions do not chain")
        if self.box is not None and self.weights[-1].shape[0] != 6:
            raise ValueError("a pose encoder must have 6 outputs")
        self.pose_weights = np.asarray(self.pose_weights, dtype=np.float64)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def features(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W) binary images -> (N, input_dim) float64 network inputs."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        n, h, w = images.shape
        if self.image_shape is not None and (h, w) != tuple(self.image_shape):
            raise ValueError(f"image is {h}x{w}, encoder expects {self.image_shape[0]}x{self.image_shape[1]}")
        x = images.astype(np.float64)
        p = self.pool
        if p > 1:
            if h % p or w % p:
                raise ValueError(f"image size {h}x{w} is not divisible by the pooling factor {p}")
            x = x.reshape(n, h // p, p, w // p, p).mean(axis=(2, 4))
        x = x.reshape(n, -1)
        if x.shape[1] != self.input_dim:
            raise ValueError(f"encoder expects {self.input_dim} inputs, got {x.shape[1]}")
        return x

    def forward_features(self, x: np.ndarray, keep: bool = False):
        acts = [x]
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = acts[-1] @ W.T + b
            acts.append(sigmoid(z) if act == "sigmoid" else z)
        return acts if keep else acts[-1]

    def output_to_pose(self, s: np.ndarray) -> np.ndarray:
        if self.box is None:
            return s
        return self.box.lower + s * self.box.span

    def predict(self, images: np.ndarray, chunk: int = 8192) -> np.ndarray:
        images = np.asarray(images)
        single = images.ndim == 2
        if single:
            images = images[None]
        outs = [
            self.output_to_pose(self.forward_features(self.features(images[i : i + chunk])))
            for i in range(0, len(images), chunk)
        ]
        out = np.concatenate(outs) if outs else np.zeros((0, 6))
        return out[0] if single else out

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpEncoder":
        return MlpEncoder(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            tuple(self.activations),
            self.box,
            self.pool,
            self.image_shape,
            self.pose_weights.copy(),
        )


def encoder_forward(e: MlpEncoder, img: BitImage) -> Pose:
    return Pose.of(e.predict(img.bits))


def init_encoder(
    image_shape: tuple[int, int],
    box: PoseBox,
    hidden: Sequence[int] = (200,),
    pool: int = 1,
    clip: float | None = None,
    rng: np.random.Generator | None = None,
    pose_weights: Sequence[float] | None = None,
) -> MlpEncoder:
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = image_shape
    dims = [(h // pool) * (w // pool), *hidden, 6]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-a, a, size=(fan_out, fan_in))
        if clip is not None:
            np.clip(W, -clip, clip, out=W)
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return MlpEncoder(
        weights,
        biases,
        ("sigmoid",) * (len(dims) - 1),
        box,
        pool,
        (h, w),
        np.ones(6) if pose_weights is None else np.asarray(pose_weights, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# loss, gradients, optimizer


def smooth_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean Huber-type loss (delta 1): 0.5 d^2 if |d| < 1 else |d| - 0.5."""
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    per = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    if mask is not None:
        per = per[..., np.asarray(mask, dtype=bool)]
    return float(per.mean())


def normalize_poses(poses: np.ndarray, box: PoseBox) -> np.ndarray:
    span = np.where(box.span > 0, box.span, 1.0)
    return (poses - box.lower) / span


def spectral_norm(W: np.ndarray, iters: int = 20, v0: np.ndarray | None = None):
    """Power-iteration estimate of the largest singular value; returns (sigma, u, v)."""
    v = np.ones(W.shape[1]) if v0 is None else v0.copy()
    v /= np.linalg.norm(v) or 1.0
    u = W @ v
    for _ in range(iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0, np.zeros(W.shape[0]), v
        u /= nu
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0, u, v
        v /= nv
    sigma = float(u @ W @ v)
    return sigma, u, v


def loss_and_grads(
    e: MlpEncoder,
    x: np.ndarray,
    target_norm: np.ndarray,
    mask: np.ndarray,
    lam: float = 0.0,
    power_vectors: list[np.ndarray] | None = None,
    power_iters: int = 20,
):
    """Loss (smooth L1 on free outputs + lam * prod ||W||_2) and parameter gradients."""
    acts = e.forward_features(x, keep=True)
    out = acts[-1]
    mask = np.asarray(mask, dtype=bool)
    d = out - target_norm
    n_terms = x.shape[0] * int(mask.sum())
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    loss = float(per[:, mask].sum() / n_terms)
    g = np.where(ad < 1.0, d, np.sign(d)) * mask / n_terms
    grads_w: list[np.ndarray] = [None] * len(e.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(e.weights)  # type: ignore[list-item]
    for l in range(len(e.weights) - 1, -1, -1):
        a_out = acts[l + 1]
        if e.activations[l] == "sigmoid":
            g = g * a_out * (1.0 - a_out)
        grads_w[l] = g.T @ acts[l]
        grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = g @ e.weights[l]
    if lam > 0:
        sig, us, vs = [], [], []
        for l, W in enumerate(e.weights):
            v0 = power_vectors[l] if power_vectors is not None else None
            s, u, v = spectral_norm(W, power_iters, v0)
            if power_vectors is not None:
                power_vectors[l] = v
            sig.append(s)
            us.append(u)
            vs.append(v)
        prod = float(np.prod(sig))
        loss += lam * prod
        for l in range(len(e.weights)):
            others = float(np.prod([s for k, s in enumerate(sig) if k != l]))
            grads_w[l] = grads_w[l] + lam * others * np.outer(us[l], vs[l])
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    return loss, grads


@dataclass
class AdamState:
    params: list[np.ndarray]
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(params, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, gradients: list[np.ndarray], lr: float) -> AdamState:
    """One bias-corrected Adam update, applied in place to state.params."""
    if len(gradients) != len(state.params):
        raise ValueError("gradient list does not match parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v, g in zip(state.params, state.m, state.v, gradients):
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# training and testing


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    lam: float = 0.1
    clip: float = 0.05
    seed: int = 0
    pose_weights: tuple[float, ...] = (1.0,) * 6
    hidden: tuple[int, ...] = (200,)
    pool: int = 1
    n_train: int = 20000
    power_iters: int = 20

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose_weights"] = list(self.pose_weights)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "pose_weights" in d:
            d["pose_weights"] = tuple(float(v) for v in d["pose_weights"])
        if "hidden" in d:
            d["hidden"] = tuple(int(v) for v in d["hidden"])
        return cls(**d)


@dataclass
class PoseImageDataset:
    poses: np.ndarray  # (N, 6)
    images: np.ndarray  # (N, H, W) bool
    provenance: str = "random"

    def __len__(self) -> int:
        return len(self.poses)

    def manifest_lines(self, image_paths: Sequence[str]) -> list[str]:
        return [
            json.dumps({"pose": [float(v) for v in q], "image": p, "provenance": self.provenance})
            for q, p in zip(self.poses, image_paths)
        ]


def sample_visible(
    t: TargetModel, box: PoseBox, k: CameraIntrinsics, n: int, rng: np.random.Generator, max_rounds: int = 100
) -> PoseImageDataset:
    """n random box poses with a fully visible target (invisible draws are resampled)."""
    r = renderer(t, k, True)
    poses = np.zeros((0, 6))
    images = np.zeros((0, k.H, k.W), dtype=bool)
    for _ in range(max_rounds):
        need = n - len(poses)
        if need <= 0:
            break
        q = box.sample(rng, need)
        imgs, ok = r.render(q)
        poses = np.concatenate([poses, q[ok]])
        images = np.concatenate([images, imgs[ok]])
    if len(poses) < n:
        raise ValueError("could not draw enough poses with the target fully visible")
    return PoseImageDataset(poses[:n], images[:n], "random")


def train_encoder(
    t: TargetModel,
    box: PoseBox,
    k: CameraIntrinsics,
    cfg: TrainConfig,
    data: PoseImageDataset | None = None,
    log=None,
) -> MlpEncoder:
    rng = np.random.default_rng(cfg.seed)
    enc = init_encoder((k.H, k.W), box, cfg.hidden, cfg.pool, cfg.clip, rng, cfg.pose_weights)
    if data is None:
        data = sample_visible(t, box, k, cfg.n_train, rng)
    x_all = enc.features(data.images)
    y_all = normalize_poses(data.poses, box)
    mask = box.span > 0
    state = AdamState.zeros_like(enc.params())
    power_vectors = [np.ones(W.shape[1]) / math.sqrt(W.shape[1]) for W in enc.weights]
    history = []
    n = len(x_all)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = loss_and_grads(enc, x_all[idx], y_all[idx], mask, cfg.lam, power_vectors, cfg.power_iters)
            adam_step(state, grads, cfg.lr)
            for W in enc.weights:
                np.clip(W, -cfg.clip, cfg.clip, out=W)
            total += loss * len(idx)
        history.append(total / n)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.6g}")
    enc.history = history  # type: ignore[attr-defined]
    return enc


def build_test_grid(t: TargetModel, box: PoseBox, eta, k: CameraIntrinsics) -> PoseImageDataset:
    from .reach import grid_sample

    grid = grid_sample(box, eta)
    poses = grid.poses()
    imgs, ok = renderer(t, k, True).render(poses)
    if not ok.any():
        raise ValueError("test grid is empty: no grid pose has the target fully visible")
    return PoseImageDataset(poses[ok], imgs[ok], "grid")


def empirical_max_error(e: MlpEncoder, ds: PoseImageDataset, w: Sequence[float] | None = None) -> float:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    return float(pose_errors(e, ds.poses, ds.images, w).max())


def pose_errors(e: MlpEncoder, poses: np.ndarray, images: np.ndarray, w: Sequence[float] | None = None) -> np.ndarray:
    w = e.pose_weights if w is None else w
    return pose_norm(e.predict(images) - poses, w)


def encoder_lipschitz_bound(e: MlpEncoder, w: Sequence[float] | None = None) -> float:
    """Upper bound on ||E(i1) - E(i2)|| / ||i1 - i2||.

    Input norm: Euclidean on the binary image (sqrt of differing pixels);
    output norm: weighted L-infinity on poses.  Average pooling by p has
    operator norm 1/p; the box head scales output j by span_j.
    """
    w = e.pose_weights if w is None else np.asarray(w, dtype=np.float64)
    bound = 1.0
    for W, act in zip(e.weights, e.activations):
        bound *= float(np.linalg.norm(W, 2)) if W.size else 0.0
        bound *= ACTIVATION_SLOPE[act]
    bound /= e.pool
    if e.box is not None:
        bound *= float(np.max(w * e.box.span))
    return bound


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"GGMENC\x00\x00"
_VERSION = 1


def save_checkpoint(e: MlpEncoder, path: str, meta: dict | None = None) -> None:
    """Binary weights (little-endian float64) plus a JSON sidecar at path + '.json'."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(e.weights))]
    for W, act in zip(e.weights, e.activations):
        parts.append(struct.pack("<III", W.shape[0], W.shape[1], ACTIVATIONS.index(act)))
    h, w = e.image_shape if e.image_shape is not None else (0, 0)
    parts.append(struct.pack("<IIII", e.pool, h, w, 1 if e.box is not None else 0))
    if e.box is not None:
        parts.append(np.concatenate([e.box.lower, e.box.upper]).astype("<f8").tobytes())
    parts.append(np.asarray(e.pose_weights, dtype="<f8").tobytes())
    for W, b in zip(e.weights, e.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    sidecar = {
        "format_version": _VERSION,
        "dims": e.dims,
        "activations": list(e.activations),
        "pool": e.pool,
        "image_shape": list(e.image_shape) if e.image_shape else None,
        "box": e.box.to_dict() if e.box is not None else None,
        "pose_weights": [float(v) for v in e.pose_weights],
        "L_E": encoder_lipschitz_bound(e),
        "layer_spectral_norms": [float(np.linalg.norm(W, 2)) for W in e.weights],
    }
    if meta:
        sidecar.update(meta)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> MlpEncoder:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError("not an encoder checkpoint")
    version, nl = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    shapes, acts = [], []
    for _ in range(nl):
        o, i, a = struct.unpack_from("<III", data, pos)
        pos += 12
        shapes.append((o, i))
        acts.append(ACTIVATIONS[a])
    pool, h, w, has_box = struct.unpack_from("<IIII", data, pos)
    pos += 16
    box = None
    if has_box:
        b = np.frombuffer(data, dtype="<f8", count=12, offset=pos)
        pos += 96
        box = PoseBox(b[:6], b[6:])
    pw = np.frombuffer(data, dtype="<f8", count=6, offset=pos).copy()
    pos += 48
    weights, biases = [], []
    for o, i in shapes:
        weights.append(np.frombuffer(data, dtype="<f8", count=o * i, offset=pos).reshape(o, i).copy())
        pos += 8 * o * i
        biases.append(np.frombuffer(data, dtype="<f8", count=o, offset=pos).copy())
        pos += 8 * o
    return MlpEncoder(weights, biases, tuple(acts), box, pool, (h, w) if h else None, pw)
