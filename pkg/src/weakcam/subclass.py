"""Sub-class discovery and joint classifier training.

Positives of each primary class are clustered on frozen pooled features into
pseudo sub-class labels; the classifier then trains the primary head and the
sub-class head jointly so that intra-class appearance variation (subtype
texture, halo presence) is absorbed by the sub-class head instead of leaking
into the primary class activation maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .fields import make_rng
from .nn import NetConfig, OneCycleSchedule, SgdState, TrainingDiverged, forward_batch, init_params, joint_loss, sgd_step
from .refine import pseudo_label

__all__ = [
    "extract_frozen_features",
    "KmeansResult",
    "kmeans",
    "cluster_subclasses",
    "build_subclass_labels",
    "TrainConfig",
    "EpochLog",
    "TrainResult",
    "train_classifier",
    "ProbeRow",
    "run_probe",
    "class_response_maps",
    "compute_cam",
    "compute_cams_batch",
    "mean_cam_dice",
]

_FEATURE_STACK = (8, 16)


def _valid_conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[-1]
    b, c, h, ww = x.shape
    h2 = (h - k) // stride + 1
    w2 = (ww - k) // stride + 1
    sb, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (b, c, h2, w2, k, k), (sb, sc, sh * stride, sw * stride, sh, sw)
    )
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def extract_frozen_features(image: np.ndarray, probe_seed: int, dim: int = 64) -> np.ndarray:
    """Pooled responses of a frozen, randomly initialized linear conv stack.

    Per output channel the vector holds the spatial mean and the maximum of
    the mean-centered response. The stack is linear with valid convolutions,
    so a constant intensity shift of the input moves only the mean
    coordinates; the centered-max half is shift invariant.
    """
    if dim % 2 != 0 or dim < 2:
        raise ValueError("feature dim must be a positive even number")
    rng = make_rng(probe_seed)
    x = np.asarray(image, dtype=np.float64)[None, None]
    c_in = 1
    for c_out in (*_FEATURE_STACK, dim // 2):
        fan_in = c_in * 9
        w = rng.normal(0, math.sqrt(1.0 / fan_in), (c_out, c_in, 3, 3))
        x = _valid_conv(x, w, stride=2)
        c_in = c_out
    maps = x[0]
    means = maps.mean(axis=(1, 2))
    centered_max = (maps - means[:, None, None]).max(axis=(1, 2))
    return np.concatenate([means, centered_max])


@dataclass(frozen=True)
class KmeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse_history: tuple[float, ...]


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[i] = x[idx]
        closest = np.minimum(closest, ((x - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(features, k: int, seed: int, max_iter: int = 100) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding, deterministic in seed.

    Runs until the assignment reaches a fixpoint or max_iter. An emptied
    cluster is re-seeded at the point farthest from its former centroid
    (ties resolved toward the lowest sample index). Per-iteration SSE is
    recorded and asserted non-increasing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, d) array")
    if k < 1:
        raise ValueError("cluster count must be positive")
    n = x.shape[0]
    if n < k:
        raise ValueError(f"only {n} points for {k} clusters; lower the sub-class count for this class")
    rng = make_rng(seed)
    centroids = _plus_plus_init(x, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        sse = float(d2[np.arange(n), new_labels].sum())
        if history and sse > history[-1] + 1e-9:
            raise AssertionError(f"k-means SSE increased: {history[-1]} -> {sse}")
        history.append(sse)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                away = ((x - centroids[j]) ** 2).sum(axis=1)
                centroids[j] = x[int(np.argmax(away))]
    return KmeansResult(labels=labels, centroids=centroids, sse_history=tuple(history))


def _mix_seed(seed: int, salt: int) -> int:
    return (seed * 1_000_003 + salt) % (2**63)


def cluster_subclasses(
    samples,
    n_classes: int,
    k: int,
    cluster_seed: int,
    feature_seed: int,
    feature_dim: int = 64,
) -> dict[tuple[int, int], int]:
    """Cluster each primary class's positives; maps (sample index, class) -> cluster id.

    Every present class of a sample is clustered on the same whole-image
    feature vector.
    """
    features: dict[int, np.ndarray] = {}
    for i, s in enumerate(samples):
        if s.y_p.any():
            features[i] = extract_frozen_features(s.image, feature_seed, dim=feature_dim)
    assignments: dict[tuple[int, int], int] = {}
    for c in range(n_classes):
        idx = [i for i, s in enumerate(samples) if s.y_p[c] == 1]
        if not idx:
            continue
        result = kmeans(np.stack([features[i] for i in idx]), k, seed=_mix_seed(cluster_seed, c))
        for i, label in zip(idx, result.labels):
            assignments[(i, c)] = int(label)
    return assignments


def build_subclass_labels(
    assignments: dict[tuple[int, int], int],
    y_p: np.ndarray,
    k: int,
) -> np.ndarray:
    """Per-sample 0/1 target of length C*K: one-hot per present class, zeros otherwise."""
    y_p = np.asarray(y_p)
    n, c_total = y_p.shape
    out = np.zeros((n, c_total * k), dtype=np.float64)
    for (i, c), cluster in assignments.items():
        if not (0 <= i < n and 0 <= c < c_total):
            raise ValueError(f"assignment ({i}, {c}) outside the dataset")
        if y_p[i, c] != 1:
            raise ValueError(f"sample {i} has no class {c} but carries a sub-class assignment")
        if not 0 <= cluster < k:
            raise ValueError(f"cluster id {cluster} outside [0, {k})")
        out[i, c * k + cluster] = 1.0
    for i in range(n):
        for c in range(c_total):
            if y_p[i, c] == 1 and (i, c) not in assignments:
                raise ValueError(f"missing sub-class assignment for sample {i}, class {c}")
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 24
    subclass_loss_weight: float = 0.5
    peak_lr: float = 0.05
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    end_div: float = 1e4
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid epochs/batch size")
        if self.subclass_loss_weight < 0:
            raise ValueError("sub-class loss weight must be non-negative")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss_p: float
    loss_s: float
    val_cam_dice: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[EpochLog] = field(default_factory=list)


def _stack_images(samples) -> np.ndarray:
    return np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])[:, None]


def class_response_maps(cfg: NetConfig, params, images: np.ndarray) -> np.ndarray:
    """Raw pre-ReLU primary-head responses, shape (B, C, h, w).

    The spatial mean of each map equals the corresponding primary logit
    (1x1 head and global average pooling commute).
    """
    return forward_batch(cfg, params, images).resp_p


def compute_cams_batch(cfg: NetConfig, params, images: np.ndarray) -> np.ndarray:
    """ReLU of the response maps, max-normalized per class; all-zero maps stay zero."""
    cams = np.maximum(class_response_maps(cfg, params, images), 0.0)
    peaks = cams.max(axis=(2, 3), keepdims=True)
    return np.divide(cams, peaks, out=np.zeros_like(cams), where=peaks > 0)


def compute_cam(cfg: NetConfig, params, image: np.ndarray) -> np.ndarray:
    return compute_cams_batch(cfg, params, np.asarray(image, dtype=np.float64)[None, None])[0]


def mean_cam_dice(cfg: NetConfig, params, samples, threshold: float) -> float:
    """Mean Dice of thresholded-CAM pseudo-labels over every (sample, class) pair."""
    if not samples:
        return float("nan")
    images = _stack_images(samples)
    cams = compute_cams_batch(cfg, params, images)
    scores = []
    for s, cam in zip(samples, cams):
        labels = pseudo_label(cam, threshold, s.gt_mask.shape)
        for c in range(cfg.n_classes):
            scores.append(metrics.dice(labels == c + 1, s.gt_mask == c + 1))
    return float(np.mean(scores))


def _train_loop(
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    train_samples,
    y_s: np.ndarray | None,
    val_samples,
    cam_threshold: float,
    lam: float,
    freeze_subclass_head: bool,
    probe_interval: int | None,
):
    images = _stack_images(train_samples)
    y_p = np.stack([s.y_p for s in train_samples]).astype(np.float64)
    n = len(train_samples)
    params = init_params(net_cfg)
    epoch_rows: list[EpochLog] = []
    probe_rows: list[ProbeRow] = []
    if train_cfg.epochs == 0:
        return params, epoch_rows, probe_rows

    batches_per_epoch = math.ceil(n / train_cfg.batch_size)
    schedule = OneCycleSchedule(
        total_steps=train_cfg.epochs * batches_per_epoch,
        peak_lr=train_cfg.peak_lr,
        warmup_fraction=train_cfg.warmup_fraction,
        start_div=train_cfg.start_div,
        end_div=train_cfg.end_div,
    )
    state = SgdState(momentum=train_cfg.momentum)
    rng = make_rng(train_cfg.seed)
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(2)
        for b in range(batches_per_epoch):
            idx = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            ys_batch = y_s[idx] if y_s is not None else None
            loss, grads, parts = joint_loss(
                net_cfg, params, images[idx], y_p[idx], ys_batch, lam,
                freeze_subclass_head=freeze_subclass_head,
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", params)
            params = sgd_step(params, grads, schedule, step, state)
            sums += (parts.loss_p, parts.loss_s)
            if probe_interval is not None and step % probe_interval == 0:
                probe_rows.append(
                    ProbeRow(
                        step=step,
                        loss_p=parts.loss_p,
                        loss_s=parts.loss_s,
                        cam_dice=mean_cam_dice(net_cfg, params, val_samples, cam_threshold),
                    )
                )
            step += 1
        epoch_rows.append(
            EpochLog(
                epoch=epoch,
                loss_p=sums[0] / batches_per_epoch,
                loss_s=sums[1] / batches_per_epoch,
                val_cam_dice=mean_cam_dice(net_cfg, params, val_samples, cam_threshold),
            )
        )
    return params, epoch_rows, probe_rows


def train_classifier(
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    train_samples,
    y_s: np.ndarray | None,
    val_samples=(),
    cam_threshold: float = 0.25,
) -> TrainResult:
    """Joint training of encoder and heads; the sub-class loss is dropped
    (weight 0) when no sub-class targets are supplied."""
    lam = train_cfg.subclass_loss_weight if y_s is not None else 0.0
    params, log, _ = _train_loop(
        net_cfg, train_cfg, train_samples, y_s, val_samples, cam_threshold,
        lam=lam, freeze_subclass_head=False, probe_interval=None,
    )
    return TrainResult(params=params, log=log)


@dataclass(frozen=True)
class ProbeRow:
    step: int
    loss_p: float
    loss_s: float
    cam_dice: float


def run_probe(
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    train_samples,
    y_s: np.ndarray,
    val_samples=(),
    cam_threshold: float = 0.25,
    eval_interval: int = 10,
) -> tuple[TrainResult, list[ProbeRow]]:
    """Training-dynamics probe: optimize the primary loss only.

    The sub-class head is frozen (excluded from gradients and updates) and the
    sub-class loss carries zero weight, but its value is tracked at every
    eval_interval steps together with the validation CAM Dice.
    """
    if y_s is None:
        raise ValueError("the probe needs sub-class targets to track their loss")
    if eval_interval < 1:
        raise ValueError("eval_interval must be positive")
    params, log, rows = _train_loop(
        net_cfg, train_cfg, train_samples, y_s, val_samples, cam_threshold,
        lam=0.0, freeze_subclass_head=True, probe_interval=eval_interval,
    )
    return TrainResult(params=params, log=log), rows
