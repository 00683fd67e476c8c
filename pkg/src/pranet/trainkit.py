"""Synthetic shapes, augmentation, losses, optimizers, schedules, metrics and
the mini-batch training loop used by the estimators and the CLI."""

from __future__ import annotations

import csv
import io
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from . import tensor as tn
from .exceptions import ConfigError, DomainError, NumericError
from .geometry import PointCloud
from .models import NetworkSpec, forward
from .params import ParameterStore, atomic_write_text
from .tensor import Tensor

SHAPES = ("sphere", "cube", "cylinder", "torus", "cone")

# global part ids: (first id, number of parts) per shape
PART_OFFSETS = {"sphere": (0, 1), "cube": (1, 1), "cylinder": (2, 2), "torus": (4, 2), "cone": (6, 1)}
NUM_PARTS = 7

# ------------------------------------------------------------------ synthetic data


@dataclass
class SyntheticSpec:
    classes: list[str] = field(default_factory=lambda: ["sphere", "cube", "cylinder", "torus"])
    points_per_cloud: int = 256
    noise_sigma: float = 0.01
    count_per_class: int = 50
    seed: int = 0
    shape_variation: float = 0.2

    def __post_init__(self):
        self.classes = list(self.classes)
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown or not self.classes:
            raise ConfigError(f"unknown shape class(es) {unknown}; choose from {SHAPES}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("shape classes must be distinct")
        if self.points_per_cloud < 1 or self.count_per_class < 0:
            raise ConfigError("points_per_cloud must be positive and count_per_class nonnegative")
        if self.noise_sigma < 0 or not 0 <= self.shape_variation < 1:
            raise ConfigError("noise_sigma must be >= 0 and shape_variation in [0, 1)")


def _unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, var):
    pts = _unit(rng, n)
    return pts, np.zeros(n, dtype=np.int64), np.array([[0, 0, 1], [0, 0, -1], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], float), 1.0


def _cube(rng, n, var):
    half = 1.0 + var * rng.uniform(-1, 1, size=3)
    area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=area / area.sum())
    pts = rng.uniform(-1, 1, size=(n, 3))
    pts[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
    pts *= half
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float) * half
    return pts, np.zeros(n, dtype=np.int64), corners, float(np.linalg.norm(half))


def _cylinder(rng, n, var):
    r = 1.0 + var * rng.uniform(-1, 1)
    h = 1.0 + var * rng.uniform(-1, 1)  # half height
    side_area, cap_area = 2 * np.pi * r * 2 * h, 2 * np.pi * r * r
    side = rng.random(n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(side, r, r * np.sqrt(rng.random(n)))
    z = np.where(side, rng.uniform(-h, h, n), rng.choice([-h, h], size=n))
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    labels = np.where(side, 1, 0).astype(np.int64)  # 0 cap, 1 side
    keys = np.array([[0, 0, h], [0, 0, -h]], float)
    return pts, labels, keys, float(np.hypot(r, h))


def _torus(rng, n, var):
    R = 1.0
    a = 0.35 * (1.0 + var * rng.uniform(-1, 1))
    # surface element is proportional to R + a cos(v): rejection sample v
    v = np.empty(0)
    while v.size < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) * (R + a) < R + a * np.cos(cand)
        v = np.concatenate([v, cand[keep]])
    v = v[:n]
    u = rng.uniform(0, 2 * np.pi, n)
    ring = R + a * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), a * np.sin(v)], axis=1)
    labels = (np.cos(v) >= 0).astype(np.int64)  # 0 inner, 1 outer
    keys = np.array([[R + a, 0, 0], [-(R + a), 0, 0], [0, R + a, 0], [0, -(R + a), 0]], float)
    return pts, labels, keys, R + a


def _cone(rng, n, var):
    r = 1.0 + var * rng.uniform(-1, 1)
    h = 1.0 + var * rng.uniform(-1, 1)  # half height; apex at +h, base at -h
    slant = np.hypot(r, 2 * h)
    lat_area, base_area = np.pi * r * slant, np.pi * r * r
    lateral = rng.random(n) < lat_area / (lat_area + base_area)
    theta = rng.uniform(0, 2 * np.pi, n)
    t = np.sqrt(rng.random(n))  # fraction of the way from apex to base
    rad = np.where(lateral, r * t, r * np.sqrt(rng.random(n)))
    z = np.where(lateral, h - 2 * h * t, -h)
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    keys = np.array([[0, 0, h], [0, 0, -h]], float)
    return pts, np.zeros(n, dtype=np.int64), keys, float(max(h, np.hypot(r, h)))


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus, "cone": _cone}


def sample_shape(name: str, n: int, rng: np.random.Generator, noise_sigma: float = 0.0, variation: float = 0.0) -> PointCloud:
    """One normalized, jittered cloud of ``name``.

    The analytic surface is centred on the origin and scaled by its exact
    bounding radius, then each point moves by Gaussian noise whose length is
    clipped at 3 sigma. Keypoints are the indices of the cloud points closest
    to the shape's analytic landmarks (poles, corners, cap centres, ...).
    """
    if name not in _SAMPLERS:
        raise ConfigError(f"unknown shape {name!r}")
    pts, local, keys, radius = _SAMPLERS[name](rng, n, variation)
    pts = pts / radius
    keys = keys / radius
    if noise_sigma > 0:
        jit = rng.standard_normal((n, 3)) * noise_sigma
        norm = np.linalg.norm(jit, axis=1, keepdims=True)
        cap = 3.0 * noise_sigma
        jit *= np.minimum(1.0, cap / np.maximum(norm, 1e-300))
        pts = pts + jit
    d = ((pts[None, :, :] - keys[:, None, :]) ** 2).sum(-1)
    key_idx = np.unique(np.argmin(d, axis=1))
    offset = PART_OFFSETS[name][0]
    return PointCloud(pts, labels=local + offset, category=SHAPES.index(name), keypoints=key_idx)


def generate_synthetic(spec: SyntheticSpec) -> list[PointCloud]:
    """Class-balanced list of clouds; ``category`` indexes ``spec.classes``.

    Clouds are ordered class by class; shuffle before use if needed.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    for ci, name in enumerate(spec.classes):
        for _ in range(spec.count_per_class):
            c = sample_shape(name, spec.points_per_cloud, rng, spec.noise_sigma, spec.shape_variation)
            c.category = ci
            out.append(c)
    return out


def stack_clouds(clouds: list[PointCloud]):
    """(X, y, part labels, keypoint mask) arrays from a list of equally sized clouds."""
    X = np.stack([c.coords for c in clouds])
    y = np.array([c.category for c in clouds], dtype=np.int64)
    parts = np.stack([c.labels for c in clouds]) if all(c.labels is not None for c in clouds) else None
    mask = np.zeros(X.shape[:2], dtype=np.int64)
    for i, c in enumerate(clouds):
        if c.keypoints is not None:
            mask[i, c.keypoints] = 1
    return X, y, parts, mask


def make_split(classes=("sphere", "cube", "cylinder", "torus"), n_train: int = 200, n_test: int = 80,
               points: int = 256, noise_sigma: float = 0.01, seed: int = 0):
    """Independent class-balanced train and test sets as stacked arrays."""
    k = len(classes)
    if n_train % k or n_test % k:
        raise ConfigError("split sizes must be multiples of the number of classes")
    ss = np.random.SeedSequence(seed).spawn(2)
    sets = []
    for n, s in zip((n_train, n_test), ss):
        spec = SyntheticSpec(list(classes), points, noise_sigma, n // k, int(s.generate_state(1)[0]))
        sets.append(stack_clouds(generate_synthetic(spec)))
    return sets[0], sets[1]


# ------------------------------------------------------------------ augmentation


@dataclass
class AugmentConfig:
    scale_min: float = 0.66
    scale_max: float = 1.33
    shift_range: float = 0.2

    def __post_init__(self):
        if not 0 <= self.scale_min <= self.scale_max or self.shift_range < 0:
            raise ConfigError("augmentation needs 0 <= scale_min <= scale_max and shift_range >= 0")


def augment_coords(X: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-cloud anisotropic scale and translation of a (B, N, 3) array."""
    X = np.asarray(X, dtype=np.float64)
    B = X.shape[0]
    scale = rng.uniform(cfg.scale_min, cfg.scale_max, size=(B, 1, 3))
    shift = rng.uniform(-cfg.shift_range, cfg.shift_range, size=(B, 1, 3))
    return X * scale + shift


def augment(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    coords = augment_coords(cloud.coords[None], cfg, rng)[0]
    return PointCloud(coords, cloud.labels, cloud.category, cloud.keypoints)


# ------------------------------------------------------------------ losses


def _weighted_sum(logp: Tensor, q: np.ndarray) -> Tensor:
    """``-sum(q * logp) / rows``"""
    rows = logp.shape[0]
    s = tn.reduce("sum", tn.reduce("sum", tn.mul(logp, Tensor(q)), axis=1), axis=0)
    return tn.scale(s, -1.0 / rows)


def smoothing_targets(target: np.ndarray, K: int, eps: float) -> np.ndarray:
    target = np.asarray(target, dtype=np.intp).reshape(-1)
    if not 0.0 <= eps < 1.0:
        raise DomainError(f"label smoothing must lie in [0, 1), got {eps}")
    if target.size and (target.min() < 0 or target.max() >= K):
        raise IndexError(f"targets must lie in [0, {K})")
    if K == 1:
        return np.ones((target.size, 1))
    q = np.full((target.size, K), eps / (K - 1))
    q[np.arange(target.size), target] = 1.0 - eps
    return q


def smoothed_cross_entropy(logits: Tensor, target, eps: float = 0.2) -> Tensor:
    """Mean over rows of ``-sum_c q_c log softmax(logits)_c`` with (1-eps) on the true class."""
    if logits.ndim != 2:
        raise DomainError("logits must be (rows, classes)")
    q = smoothing_targets(target, logits.shape[1], eps).astype(logits.dtype)
    if q.shape[0] != logits.shape[0]:
        raise DomainError(f"{q.shape[0]} targets for {logits.shape[0]} rows")
    return _weighted_sum(tn.log_softmax(logits), q)


def binary_cross_entropy(logits: Tensor, target, pos_weight: float = 1.0) -> Tensor:
    """Sigmoid cross-entropy on a (rows, 1) logit column, via a two-way log-softmax."""
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    z = tn.reshape(logits, (y.size, 1))
    two = tn.concat([Tensor(np.zeros((y.size, 1), dtype=z.dtype)), z], axis=1)
    q = np.stack([1.0 - y, pos_weight * y], axis=1).astype(z.dtype)
    return _weighted_sum(tn.log_softmax(two), q)


# ------------------------------------------------------------------ optimizers


def optimizer_step(kind: str, params: list[np.ndarray], grads: list[np.ndarray | None], state: dict, lr: float,
                   momentum: float = 0.9, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """Update ``params`` in place and return the (mutated) optimizer state.

    SGD keeps a velocity ``v = momentum * v + g`` and steps ``p -= lr * v``.
    Adam uses bias-corrected first and second moments.
    """
    if kind == "sgd":
        vel = state.setdefault("velocity", [None] * len(params))
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if weight_decay:
                g = g + weight_decay * p
            if momentum:
                vel[i] = g.copy() if vel[i] is None else momentum * vel[i] + g
                g = vel[i]
            p -= lr * g
        return state
    if kind == "adam":
        b1, b2 = betas
        t = state.get("t", 0) + 1
        state["t"] = t
        m = state.setdefault("m", [None] * len(params))
        v = state.setdefault("v", [None] * len(params))
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if weight_decay:
                g = g + weight_decay * p
            m[i] = (1 - b1) * g if m[i] is None else b1 * m[i] + (1 - b1) * g
            v[i] = (1 - b2) * g * g if v[i] is None else b2 * v[i] + (1 - b2) * g * g
            p -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
        return state
    raise ConfigError(f"unknown optimizer {kind!r}")


class Optimizer:
    """Stateful wrapper binding :func:`optimizer_step` to a list of tensors."""

    def __init__(self, params: list[Tensor], kind: str = "sgd", **hyper):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.hyper = hyper
        self.state: dict = {}

    def step(self, lr: float) -> None:
        optimizer_step(self.kind, [p.data for p in self.params], [p.grad for p in self.params], self.state, lr, **self.hyper)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ------------------------------------------------------------------ schedules


def cosine_lr(epoch: float, total: float, lr0: float) -> float:
    if total <= 0 or not 0 <= epoch <= total:
        raise DomainError(f"cosine schedule needs 0 <= epoch <= total, got {epoch}/{total}")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


def step_lr(epoch: int, lr0: float, gamma: float = 0.5, every: int = 30) -> float:
    if epoch < 0 or every < 1:
        raise DomainError("step schedule needs epoch >= 0 and every >= 1")
    return lr0 * gamma ** (epoch // every)


def bn_retention(epoch: int, initial_update: float = 0.9, decay: float = 0.5, every: int = 30) -> float:
    """Running-statistics retention factor for the decaying batch-norm momentum schedule.

    ``initial_update`` is the weight given to the newest batch, halved every
    ``every`` epochs; the running statistics keep ``1 - update`` of their value.
    """
    return 1.0 - initial_update * decay ** (epoch // every)


# ------------------------------------------------------------------ metrics


def classification_metrics(pred, truth, num_classes: int | None = None) -> dict:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise DomainError("predictions and truths must align")
    if truth.size == 0:
        raise DomainError("no samples to score")
    K = int(max(truth.max(), pred.max()) + 1) if num_classes is None else num_classes
    accs = []
    empty = []
    for c in range(K):
        sel = truth == c
        if not sel.any():
            empty.append(c)
            continue
        accs.append(float((pred[sel] == c).mean()))
    if empty and num_classes is not None:
        warnings.warn(f"classes {empty} have no samples and are excluded from mAcc", RuntimeWarning, stacklevel=2)
    return {"oa": float((pred == truth).mean()), "macc": float(np.mean(accs))}


def part_ious(pred: np.ndarray, truth: np.ndarray, parts) -> float:
    """Mean IoU over the parts of ``parts`` present in either prediction or truth."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (truth == p))
        union = np.sum((pred == p) | (truth == p))
        if union:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else 1.0


def partseg_metrics(pred, truth, categories, part_sets: dict | None = None) -> dict:
    """Instance mIoU (mean over shapes) and class mIoU (mean over categories)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    cats = np.asarray(categories).reshape(-1)
    if pred.shape != truth.shape or pred.shape[0] != cats.shape[0]:
        raise DomainError("predictions, truths and categories must align")
    per_shape = []
    for i in range(pred.shape[0]):
        parts = part_sets[int(cats[i])] if part_sets else np.union1d(np.unique(truth[i]), np.unique(pred[i]))
        per_shape.append(part_ious(pred[i], truth[i], parts))
    per_shape = np.array(per_shape)
    cls = [per_shape[cats == c].mean() for c in np.unique(cats)]
    return {"instance_miou": float(per_shape.mean()), "class_miou": float(np.mean(cls)), "oa": float((pred == truth).mean())}


def _matches(pred_pts: np.ndarray, gt_pts: np.ndarray, thr: float) -> np.ndarray:
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return np.zeros((len(pred_pts), len(gt_pts)), dtype=bool)
    d = np.sqrt(((pred_pts[:, None, :] - gt_pts[None, :, :]) ** 2).sum(-1))
    return d <= thr


def keypoint_iou(pred_pts, gt_pts, thr: float = 0.01) -> float:
    """TP / (TP + FP + FN) with Euclidean matching at distance ``thr``."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    hit = _matches(pred_pts, gt_pts, thr)
    tp = int(hit.any(axis=1).sum())
    fp = len(pred_pts) - tp
    fn = int((~hit.any(axis=0)).sum())
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def keypoint_ap(scores, coords, gt_pts, thr: float = 0.01) -> float:
    """Average precision of points ranked by saliency; a ground-truth keypoint is
    recalled once any prediction lies within ``thr`` of it."""
    coords = np.asarray(coords, dtype=np.float64)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(gt_pts) == 0:
        return 1.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    hit = _matches(coords[order], gt_pts, thr)
    tp = np.cumsum(hit.any(axis=1))
    precision = tp / np.arange(1, len(order) + 1)
    recalled = np.logical_or.accumulate(hit, axis=0).sum(axis=1) / len(gt_pts)
    gain = np.diff(np.concatenate([[0.0], recalled]))
    return float((gain * precision).sum())


def keypoint_metrics(scores, coords, gt_masks, thr: float = 0.01, cutoff: float = 0.5) -> dict:
    """mIoU (points with score > cutoff as predictions) and mAP over a batch of clouds."""
    scores = np.asarray(scores)
    coords = np.asarray(coords)
    gt_masks = np.asarray(gt_masks).astype(bool)
    ious, aps = [], []
    for s, x, g in zip(scores, coords, gt_masks):
        ious.append(keypoint_iou(x[s > cutoff], x[g], thr))
        aps.append(keypoint_ap(s, x, x[g], thr))
    return {"miou": float(np.mean(ious)), "map": float(np.mean(aps))}


def metrics(predictions, truths, task: str, **kw) -> dict:
    """Dispatch to the task's metric set: ``classify``, ``partseg`` or ``keypoint``."""
    if task == "classify":
        return classification_metrics(predictions, truths, kw.get("num_classes"))
    if task == "partseg":
        return partseg_metrics(predictions, truths, kw["categories"], kw.get("part_sets"))
    if task == "keypoint":
        return keypoint_metrics(predictions, kw["coords"], truths, kw.get("threshold", 0.01))
    raise ValueError(f"unknown task {task!r}")


# ------------------------------------------------------------------ training loop


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    scheduler: str = "cosine"
    step_gamma: float = 0.5
    step_every: int = 30
    label_smoothing: float = 0.2
    batch_size: int = 32
    epochs: int = 50
    scale_min: float = 0.66
    scale_max: float = 1.33
    shift_range: float = 0.2
    bn_momentum: float = 0.9
    bn_schedule: bool = False
    pos_weight: float = 1.0
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.scheduler not in ("cosine", "step", "constant"):
            raise ConfigError(f"scheduler must be 'cosine', 'step' or 'constant', got {self.scheduler!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("lr, batch_size, epochs and eval_every must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0 <= self.bn_momentum < 1:
            raise ConfigError("bn_momentum must lie in [0, 1)")
        self.augmentation  # validates the ranges

    @property
    def augmentation(self) -> AugmentConfig:
        return AugmentConfig(self.scale_min, self.scale_max, self.shift_range)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def lr_at(self, epoch: int) -> float:
        if self.scheduler == "cosine":
            return cosine_lr(epoch, self.epochs, self.lr)
        if self.scheduler == "step":
            return step_lr(epoch, self.lr, self.step_gamma, self.step_every)
        return self.lr

    def bn_at(self, epoch: int) -> float:
        return bn_retention(epoch) if self.bn_schedule else self.bn_momentum


TASKS = ("classify", "partseg", "keypoint")
CSV_COLUMNS = ["epoch", "lr", "train_loss", "train_oa", "val_oa", "val_macc"]


def task_of(spec: NetworkSpec) -> str:
    return {"classifier": "classify", "partseg": "partseg", "pointwise": "keypoint"}[spec.head["kind"]]


def csv_columns(task: str) -> list[str]:
    return CSV_COLUMNS + (["val_miou"] if task != "classify" else [])


def batches(n: int, size: int, rng: np.random.Generator | None = None, drop_single: bool = False):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        sel = order[start : start + size]
        if drop_single and len(sel) < 2:
            continue
        yield sel


def compute_loss(task: str, out: Tensor, target: np.ndarray, cfg: TrainConfig) -> Tensor:
    if task == "classify":
        return smoothed_cross_entropy(out, target, cfg.label_smoothing)
    if task == "partseg":
        logits = tn.reshape(out, (out.shape[0] * out.shape[1], out.shape[2]))
        return smoothed_cross_entropy(logits, target.reshape(-1), cfg.label_smoothing)
    return binary_cross_entropy(out, target.reshape(-1), cfg.pos_weight)


def predict_raw(spec: NetworkSpec, store: ParameterStore, X: np.ndarray, categories=None, batch_size: int = 32) -> np.ndarray:
    """Eval-mode network outputs for a (B, N, 3) array, computed in mini-batches."""
    outs = []
    with tn.no_grad():
        for sel in batches(len(X), batch_size):
            cats = None if categories is None else np.asarray(categories)[sel]
            out, _ = forward(spec, store, X[sel], mode="eval", categories=cats)
            outs.append(out.data)
    return np.concatenate(outs, axis=0)


def decide(task: str, raw: np.ndarray) -> np.ndarray:
    """Hard decisions from raw outputs: class ids, part ids or 0/1 saliency."""
    if task == "keypoint":
        return (raw[..., 0] > 0).astype(np.int64)
    return raw.argmax(axis=-1)


def evaluate(spec, store, X, y, categories=None, batch_size: int = 32, part_sets=None) -> dict:
    task = task_of(spec)
    raw = predict_raw(spec, store, X, categories, batch_size)
    pred = decide(task, raw)
    if task == "classify":
        return classification_metrics(pred, y, spec.head["num_classes"])
    if task == "partseg":
        m = partseg_metrics(pred, y, categories, part_sets)
        acc = classification_metrics(pred.reshape(-1), y.reshape(-1))
        return {"oa": m["oa"], "macc": acc["macc"], "miou": m["instance_miou"], "class_miou": m["class_miou"]}
    km = keypoint_metrics(1.0 / (1.0 + np.exp(-raw[..., 0])), X, y)
    acc = classification_metrics(pred.reshape(-1), y.reshape(-1))
    return {"oa": acc["oa"], "macc": acc["macc"], "miou": km["miou"], "map": km["map"]}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def history_csv(history: list[dict], task: str) -> str:
    buf = io.StringIO()
    cols = csv_columns(task)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in history:
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def fit_network(
    spec: NetworkSpec,
    store: ParameterStore,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    categories=None,
    eval_data: tuple | None = None,
    metrics_path=None,
    checkpoint_path=None,
    log=None,
) -> list[dict]:
    """Mini-batch training; returns one history record per epoch.

    ``y`` holds class ids (classify), per-point part ids (partseg) or per-point
    0/1 saliency (keypoint). ``eval_data`` is ``(X, y)`` or ``(X, y, categories)``.
    The metrics CSV and checkpoint, when given, are rewritten atomically after
    every epoch; an interrupt saves the checkpoint before propagating.
    """
    task = task_of(spec)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng, aug_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    hyper = {"momentum": cfg.momentum} if cfg.optimizer == "sgd" else {"betas": cfg.betas}
    opt = Optimizer(store.parameters(), cfg.optimizer, weight_decay=cfg.weight_decay, **hyper)
    aug = cfg.augmentation
    history: list[dict] = []
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            ctx = nn.Context(training=True, bn_momentum=cfg.bn_at(epoch), rng=drop_rng)
            total, seen, correct, count = 0.0, 0, 0, 0
            for sel in batches(len(X), cfg.batch_size, shuffle_rng, drop_single=True):
                xb = augment_coords(X[sel], aug, aug_rng)
                cats = None if categories is None else np.asarray(categories)[sel]
                out, _ = forward(spec, store, xb, mode="train", categories=cats, ctx=ctx)
                loss = compute_loss(task, out, y[sel], cfg)
                val = loss.item()
                if not math.isfinite(val):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                opt.zero_grad()
                tn.backward(loss)
                opt.step(lr)
                total += val * len(sel)
                seen += len(sel)
                pred = decide(task, out.data)
                correct += int((pred == y[sel]).sum())
                count += pred.size
            row = {"epoch": epoch, "lr": lr, "train_loss": total / max(seen, 1), "train_oa": correct / max(count, 1)}
            last = epoch == cfg.epochs - 1
            if eval_data is not None and ((epoch + 1) % cfg.eval_every == 0 or last):
                ev = evaluate(spec, store, *eval_data[:2], categories=eval_data[2] if len(eval_data) > 2 else None,
                              batch_size=cfg.batch_size)
                row.update({"val_oa": ev["oa"], "val_macc": ev["macc"], "val_miou": ev.get("miou")})
            row["seconds"] = time.perf_counter() - t0
            history.append(row)
            if metrics_path is not None:
                atomic_write_text(metrics_path, history_csv(history, task))
            if checkpoint_path is not None:
                store.save(checkpoint_path)
            if log is not None:
                log(row)
    except KeyboardInterrupt:
        if checkpoint_path is not None:
            store.save(checkpoint_path)
        raise
    return history
