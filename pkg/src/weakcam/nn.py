"""Minimal differentiable network kit.

A small strided-conv encoder with two 1x1-conv classification heads over a
global-average-pooled feature stack, trained with multi-label binary cross
entropy under SGD with momentum and a one-cycle learning-rate schedule.

Parameters are stored float32; all forward/backward arithmetic runs in
float64 so central-difference gradient checks are meaningful. Finite
differences divide by the realized parameter step (the float64 difference of
the two perturbed float32 values), not the nominal epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import make_rng

__all__ = [
    "NetConfig",
    "init_params",
    "forward",
    "forward_batch",
    "bce_multilabel",
    "joint_loss",
    "LossParts",
    "OneCycleSchedule",
    "SgdState",
    "sgd_step",
    "grad_check",
    "TrainingDiverged",
]


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; carries the last finite parameters."""

    def __init__(self, message: str, last_params: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.last_params = last_params


@dataclass(frozen=True)
class NetConfig:
    """Architecture: same-padding conv stack, then 1x1 heads over GAP features.

    strides picks which layers downsample (stride 2) and which keep resolution
    (stride 1); with L stride-2 layers the feature grid is image_size / 2^L
    per side. The sub-class head has n_classes * k_subclasses outputs.
    """

    image_size: int
    n_classes: int
    k_subclasses: int = 8
    channels: tuple[int, ...] = (8, 12, 12)
    strides: tuple[int, ...] | None = None
    kernel: int = 3
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size < 4 or self.n_classes < 1 or self.k_subclasses < 1:
            raise ValueError("invalid network configuration")
        if not self.channels:
            raise ValueError("need at least one encoder layer")
        if self.strides is None:
            object.__setattr__(self, "strides", (2,) + (1,) * (len(self.channels) - 1))
        if len(self.strides) != len(self.channels) or any(s not in (1, 2) for s in self.strides):
            raise ValueError("strides must match channels and contain only 1 or 2")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.image_size % (2 ** self.strides.count(2)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.strides.count(2)}"
            )
        if self.channels[-1] < self.n_classes:
            raise ValueError("feature depth must be at least the number of classes")

    @property
    def feature_size(self) -> int:
        return self.image_size // (2 ** self.strides.count(2))

    @property
    def n_subclass_outputs(self) -> int:
        return self.n_classes * self.k_subclasses


def init_params(cfg: NetConfig) -> dict[str, np.ndarray]:
    """He-style init for the encoder, small normal init for the heads; float32."""
    rng = make_rng(cfg.init_seed)
    params: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c_out in enumerate(cfg.channels):
        fan_in = c_in * cfg.kernel * cfg.kernel
        params[f"enc{i}.w"] = rng.normal(0, math.sqrt(2.0 / fan_in), (c_out, c_in, cfg.kernel, cfg.kernel)).astype(np.float32)
        params[f"enc{i}.b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    d = cfg.channels[-1]
    params["head_p.w"] = (0.01 * rng.standard_normal((cfg.n_classes, d))).astype(np.float32)
    params["head_p.b"] = np.zeros(cfg.n_classes, dtype=np.float32)
    params["head_s.w"] = (0.01 * rng.standard_normal((cfg.n_subclass_outputs, d))).astype(np.float32)
    params["head_s.b"] = np.zeros(cfg.n_subclass_outputs, dtype=np.float32)
    return params


def _windows(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    b, c, h, w = xp.shape
    h2 = (h - k) // stride + 1
    w2 = (w - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    shape = (b, c, h2, w2, k, k)
    strides = (sb, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape, strides), h2, w2


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    k = w.shape[-1]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win, _, _ = _windows(xp, k, stride)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return y.transpose(0, 3, 1, 2) + b[None, :, None, None], xp


def _conv_backward(dy: np.ndarray, xp: np.ndarray, w: np.ndarray, stride: int, out_shape):
    k = w.shape[-1]
    pad = (k - 1) // 2
    win, h2, w2 = _windows(xp, k, stride)
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dy.sum(axis=(0, 2, 3))
    contrib = np.tensordot(dy, w, axes=([1], [0]))  # (B, h2, w2, C, k, k)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * h2 : stride, j : j + stride * w2 : stride] += (
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + out_shape[2], pad : pad + out_shape[3]]
    return dx, dw, db


@dataclass
class _ForwardCache:
    inputs: list[np.ndarray]          # pre-pad input of each conv layer
    padded: list[np.ndarray]
    pre_act: list[np.ndarray]         # conv output before ReLU
    features: np.ndarray              # (B, d, h, w)
    resp_p: np.ndarray                # (B, C, h, w), pre-GAP response of head_p
    resp_s: np.ndarray
    logits_p: np.ndarray
    logits_s: np.ndarray


def forward_batch(cfg: NetConfig, params: dict[str, np.ndarray], images: np.ndarray) -> _ForwardCache:
    """Run a batch (B, 1, H, W); logits are the GAP of the 1x1 head responses."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValueError(f"expected images of shape (B, 1, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
    inputs, padded, pre_act = [], [], []
    for i in range(len(cfg.channels)):
        inputs.append(x)
        z, xp = _conv_forward(x, params[f"enc{i}.w"].astype(np.float64), params[f"enc{i}.b"].astype(np.float64), stride=cfg.strides[i])
        padded.append(xp)
        pre_act.append(z)
        x = np.maximum(z, 0.0)
    features = x
    w_p = params["head_p.w"].astype(np.float64)
    w_s = params["head_s.w"].astype(np.float64)
    resp_p = np.einsum("bdhw,cd->bchw", features, w_p) + params["head_p.b"].astype(np.float64)[None, :, None, None]
    resp_s = np.einsum("bdhw,cd->bchw", features, w_s) + params["head_s.b"].astype(np.float64)[None, :, None, None]
    return _ForwardCache(
        inputs=inputs,
        padded=padded,
        pre_act=pre_act,
        features=features,
        resp_p=resp_p,
        resp_s=resp_s,
        logits_p=resp_p.mean(axis=(2, 3)),
        logits_s=resp_s.mean(axis=(2, 3)),
    )


def forward(cfg: NetConfig, params: dict[str, np.ndarray], image: np.ndarray):
    """Single image convenience wrapper; returns (features, logits_p, logits_s)."""
    cache = forward_batch(cfg, params, np.asarray(image, dtype=np.float64)[None, None])
    return cache.features[0], cache.logits_p[0], cache.logits_s[0]


def _backward(cfg, params, cache, dlogits_p, dlogits_s, freeze_subclass_head):
    b, _, h, w = cache.resp_p.shape
    cells = h * w
    grads: dict[str, np.ndarray] = {}
    dresp_p = np.broadcast_to(dlogits_p[:, :, None, None], cache.resp_p.shape) / cells
    grads["head_p.w"] = np.einsum("bchw,bdhw->cd", dresp_p, cache.features)
    grads["head_p.b"] = dlogits_p.sum(axis=0)
    dfeat = np.einsum("bchw,cd->bdhw", dresp_p, params["head_p.w"].astype(np.float64))
    dresp_s = np.broadcast_to(dlogits_s[:, :, None, None], cache.resp_s.shape) / cells
    if not freeze_subclass_head:
        grads["head_s.w"] = np.einsum("bchw,bdhw->cd", dresp_s, cache.features)
        grads["head_s.b"] = dlogits_s.sum(axis=0)
    dfeat = dfeat + np.einsum("bchw,cd->bdhw", dresp_s, params["head_s.w"].astype(np.float64))
    dx = dfeat
    for i in reversed(range(len(cfg.channels))):
        dz = dx * (cache.pre_act[i] > 0)
        dx, dw, db = _conv_backward(
            dz, cache.padded[i], params[f"enc{i}.w"].astype(np.float64), cfg.strides[i], cache.inputs[i].shape
        )
        grads[f"enc{i}.w"] = dw
        grads[f"enc{i}.b"] = db
    return grads


def _validate_targets(t: np.ndarray) -> None:
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be 0/1")


def bce_multilabel(logits, targets) -> float:
    """Mean over labels of the numerically stable binary cross entropy."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} does not match targets {y.shape}")
    _validate_targets(y)
    per_label = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per_label.mean())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class LossParts:
    loss_p: float
    loss_s: float


def joint_loss(
    cfg: NetConfig,
    params: dict[str, np.ndarray],
    images: np.ndarray,
    y_p: np.ndarray,
    y_s: np.ndarray | None,
    lam: float,
    freeze_subclass_head: bool = False,
) -> tuple[float, dict[str, np.ndarray], LossParts]:
    """L = L_p + lam * L_s averaged over the batch, with analytic gradients.

    L_s is still evaluated at lam = 0 when sub-class targets are given (the
    training-dynamics probe tracks it without optimizing it); the freeze flag
    drops the sub-class head from the returned gradients entirely.
    """
    if lam < 0:
        raise ValueError("loss weight must be non-negative")
    if lam > 0 and y_s is None:
        raise ValueError("sub-class targets are required when the loss weight is positive")
    y_p = np.asarray(y_p, dtype=np.float64)
    _validate_targets(y_p)
    cache = forward_batch(cfg, params, images)
    b = cache.logits_p.shape[0]
    if y_p.shape != cache.logits_p.shape:
        raise ValueError(f"primary targets shape {y_p.shape} != {cache.logits_p.shape}")

    loss_p = bce_multilabel(cache.logits_p, y_p)
    dlogits_p = (_sigmoid(cache.logits_p) - y_p) / y_p.size

    loss_s = 0.0
    dlogits_s = np.zeros_like(cache.logits_s)
    if y_s is not None:
        y_s = np.asarray(y_s, dtype=np.float64)
        if y_s.shape != cache.logits_s.shape:
            raise ValueError(f"sub-class targets shape {y_s.shape} != {cache.logits_s.shape}")
        _validate_targets(y_s)
        loss_s = bce_multilabel(cache.logits_s, y_s)
        if lam > 0:
            dlogits_s = lam * (_sigmoid(cache.logits_s) - y_s) / y_s.size

    grads = _backward(cfg, params, cache, dlogits_p, dlogits_s, freeze_subclass_head)
    total = loss_p + lam * loss_s
    return total, grads, LossParts(loss_p=loss_p, loss_s=loss_s)


@dataclass(frozen=True)
class OneCycleSchedule:
    """Linear warmup to peak_lr, then cosine anneal down to peak_lr / end_div."""

    total_steps: int
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    end_div: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1 or self.peak_lr <= 0:
            raise ValueError("schedule needs positive steps and peak_lr")
        if not 0 < self.warmup_fraction < 1 or self.start_div < 1 or self.end_div < 1:
            raise ValueError("invalid schedule shape parameters")

    def lr(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")
        if self.total_steps == 1:
            return self.peak_lr
        start = self.peak_lr / self.start_div
        end = self.peak_lr / self.end_div
        warm = int(round(self.warmup_fraction * (self.total_steps - 1)))
        if step <= warm:
            if warm == 0:
                return self.peak_lr
            return start + (self.peak_lr - start) * (step / warm)
        frac = (step - warm) / (self.total_steps - 1 - warm)
        return end + 0.5 * (self.peak_lr - end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class SgdState:
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    schedule: OneCycleSchedule,
    step: int,
    state: SgdState | None = None,
) -> dict[str, np.ndarray]:
    """One (momentum) SGD update; parameters without a gradient stay untouched.

    The update is computed in float64 and stored back as float32.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r} at step {step}", params)
    lr = schedule.lr(step)
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if state is not None:
            v = state.velocity.get(name)
            v = g if v is None else state.momentum * v + g
            state.velocity[name] = v
            direction = v
        else:
            direction = g
        out[name] = (p.astype(np.float64) - lr * direction).astype(np.float32)
    return out


def grad_check(
    cfg: NetConfig,
    params: dict[str, np.ndarray],
    images: np.ndarray,
    y_p: np.ndarray,
    y_s: np.ndarray | None,
    lam: float,
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    grads: dict[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples n_coords coordinates across the parameter tensors (sub-class head
    coordinates are ignored at lam = 0, where its analytic gradient is zero by
    construction). An optional grads dict lets tests check a tampered gradient.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must be in [1e-6, 1e-3]")
    if grads is None:
        _, grads, _ = joint_loss(cfg, params, images, y_p, y_s, lam)
    names = sorted(n for n in params if n in grads)
    if lam == 0:
        names = [n for n in names if not n.startswith("head_s.")]
    sizes = [params[n].size for n in names]
    total = int(np.sum(sizes))
    rng = make_rng(seed)
    chosen = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    for flat in chosen:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[t]
        local = int(flat - offsets[t])
        idx = np.unravel_index(local, params[name].shape)

        def loss_at(delta: float) -> tuple[float, float]:
            bumped = {k: v.copy() for k, v in params.items()}
            bumped[name][idx] = np.float32(bumped[name][idx] + delta)
            value, _, _ = joint_loss(cfg, bumped, images, y_p, y_s, lam)
            return value, float(bumped[name][idx])

        up, theta_hi = loss_at(eps)
        down, theta_lo = loss_at(-eps)
        realized = theta_hi - theta_lo
        fd = (up - down) / realized
        analytic = float(np.asarray(grads[name], dtype=np.float64)[idx])
        rel = abs(analytic - fd) / max(1e-8, abs(analytic) + abs(fd))
        worst = max(worst, rel)
    return worst
