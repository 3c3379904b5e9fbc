"""Encoder / projector / predictor networks, EMA targets and the key queue.

Parameters live in plain ``dict[str, np.ndarray]`` tables. Forward passes
take a mapping of names to :class:`~bsimlab.ndgrad.Tensor` so the caller
decides which tables are differentiable leaves and which are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelDims:
    in_channels: int = 3
    conv_widths: tuple[int, ...] = (32, 64)
    conv_strides: tuple[int, ...] = (2, 2, 2)
    dh: int = 64
    proj_hidden: int = 64
    dz: int = 32
    pred_hidden: int = 64
    predictor: bool = False
    batch_norm: bool = True

    def __post_init__(self):
        if len(self.conv_strides) != len(self.conv_widths) + 1:
            raise ValueError("need one stride per conv layer (hidden widths + output layer)")


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def init_params(dims: ModelDims, rng: np.random.Generator) -> Params:
    cin = dims.in_channels
    widths = (*dims.conv_widths, dims.dh)
    p: Params = {}
    for i, c in enumerate(widths, start=1):
        p[f"enc.conv{i}.w"] = _he(rng, (c, cin, 3, 3), cin * 9)
        if dims.batch_norm:
            p[f"enc.bn{i}.g"] = np.ones(c)
            p[f"enc.bn{i}.b"] = np.zeros(c)
        elif i < len(widths):
            p[f"enc.conv{i}.b"] = np.zeros(c)
        cin = c
    p.update({
        "proj.fc1.w": _he(rng, (dims.dh, dims.proj_hidden), dims.dh),
        "proj.fc1.b": np.zeros(dims.proj_hidden),
        "proj.fc2.w": _he(rng, (dims.proj_hidden, dims.dz), dims.proj_hidden),
        "proj.fc2.b": np.zeros(dims.dz),
    })
    if dims.batch_norm:
        p["proj.bn1.g"] = np.ones(dims.proj_hidden)
        p["proj.bn1.b"] = np.zeros(dims.proj_hidden)
    if dims.predictor:
        p["pred.fc1.w"] = _he(rng, (dims.dz, dims.pred_hidden), dims.dz)
        p["pred.fc1.b"] = np.zeros(dims.pred_hidden)
        p["pred.fc2.w"] = _he(rng, (dims.pred_hidden, dims.dz), dims.pred_hidden)
        p["pred.fc2.b"] = np.zeros(dims.dz)
        if dims.batch_norm:
            p["pred.bn1.g"] = np.ones(dims.pred_hidden)
            p["pred.bn1.b"] = np.zeros(dims.pred_hidden)
    return p


def target_names(params: Mapping[str, object]) -> list[str]:
    """Names mirrored by a momentum/target network: encoder and projector."""
    return [k for k in params if k.startswith(("enc.", "proj."))]


def images_to_batch(images) -> np.ndarray:
    """Stack (H, W, C) images into an (N, C, H, W) array."""
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))


def standardize_images(batch: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Zero mean, unit std per image and channel of an (N, C, H, W) array.

    Removes global color and contrast; a flat channel maps to zeros.
    """
    batch = np.asarray(batch, dtype=np.float64)
    mu = batch.mean(axis=(2, 3), keepdims=True)
    sd = batch.std(axis=(2, 3), keepdims=True)
    return (batch - mu) / np.maximum(sd, floor)


def init_running_stats(params: Mapping[str, object]) -> Params:
    """Zero means and unit variances for every batch-norm layer in ``params``."""
    out: Params = {}
    for k in params:
        if k.startswith("enc.bn") and k.endswith(".g"):
            c = np.shape(params[k])[0]
            out[k[:-2] + ".mean"] = np.zeros(c)
            out[k[:-2] + ".var"] = np.ones(c)
    return out


def update_running_stats(running: Params, batch_stats: Mapping[str, dict], momentum: float = 0.1) -> Params:
    """r <- (1 - momentum) * r + momentum * batch statistic."""
    out = dict(running)
    for layer, st in batch_stats.items():
        for key in ("mean", "var"):
            name = f"{layer}.{key}"
            out[name] = (1.0 - momentum) * running[name] + momentum * st[key]
    return out


def encode(
    params: Mapping[str, Tensor],
    batch,
    strides=(2, 2, 2),
    *,
    running: Mapping[str, np.ndarray] | None = None,
    stats_out: dict | None = None,
    standardize: bool = True,
) -> Tensor:
    """Representation h of an (N, C, H, W) batch: 3x3 conv blocks, then GAP.

    A block is conv -> batch norm -> relu when ``params`` holds ``enc.bn{i}``
    entries, else conv (+ bias, except the last block) -> relu. Batch norm
    uses the batch's statistics (recorded into ``stats_out`` per layer) unless
    ``running`` statistics are supplied. With ``standardize`` the constant
    input first goes through :func:`standardize_images`.
    """
    if standardize:
        batch = standardize_images(batch.data if isinstance(batch, Tensor) else batch)
    x = nd.as_tensor(batch)
    n_layers = len(strides)
    if n_layers < 1 or f"enc.conv{n_layers}.w" not in params:
        raise ValueError(f"encoder weights do not match {n_layers} strides")
    if x.ndim != 4 or x.shape[1] != params["enc.conv1.w"].shape[1]:
        raise ValueError(f"encoder input shape {x.shape} does not match weights")
    for i, s in enumerate(strides, start=1):
        x = nd.conv2d(x, params[f"enc.conv{i}.w"], params.get(f"enc.conv{i}.b"), stride=s, pad=1)
        bn = f"enc.bn{i}"
        if f"{bn}.g" in params:
            g, b = params[f"{bn}.g"], params[f"{bn}.b"]
            if running is not None:
                x = nd.affine_norm(x, g, b, running[f"{bn}.mean"], running[f"{bn}.var"])
            else:
                st = {} if stats_out is not None else None
                x = nd.batch_norm(x, g, b, stats=st)
                if stats_out is not None:
                    stats_out[bn] = st
        x = nd.relu(x)
    n, c, h, w = x.shape
    return nd.mean(nd.reshape(x, (n, c, h * w)), axis=2)


def mlp(x, w1, b1, w2, b2, activation: str = "relu", norm=None) -> Tensor:
    """Two-layer MLP; ``norm`` = (gamma, beta) batch-normalizes the hidden layer."""
    x = nd.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ValueError(f"MLP input shape {x.shape} does not match weights {w1.shape}")
    hidden = nd.matmul(x, w1) + b1
    if norm is not None:
        hidden = nd.batch_norm(hidden, *norm)
    if activation == "relu":
        hidden = nd.relu(hidden)
    elif activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return nd.matmul(hidden, w2) + b2


def _hidden_norm(params: Mapping[str, Tensor], head: str):
    if f"{head}.bn1.g" in params:
        return params[f"{head}.bn1.g"], params[f"{head}.bn1.b"]
    return None


def project(params: Mapping[str, Tensor], h, activation: str = "relu") -> Tensor:
    return mlp(
        h, params["proj.fc1.w"], params["proj.fc1.b"],
        params["proj.fc2.w"], params["proj.fc2.b"], activation, _hidden_norm(params, "proj"),
    )


def predict(params: Mapping[str, Tensor], z, activation: str = "relu") -> Tensor:
    if "pred.fc1.w" not in params:
        raise ValueError("model has no predictor (only BYOL configurations carry one)")
    return mlp(
        z, params["pred.fc1.w"], params["pred.fc1.b"],
        params["pred.fc2.w"], params["pred.fc2.b"], activation, _hidden_norm(params, "pred"),
    )


def as_leaves(params: Params, names=None) -> dict[str, Tensor]:
    names = params.keys() if names is None else names
    return {k: Tensor(params[k], requires_grad=True, name=k) for k in names}


def as_constants(params: Params) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# EMA target


def tau_schedule(step: int, total_steps: int, tau_base: float) -> float:
    """Cosine ramp of the EMA momentum from ``tau_base`` (step 0) to 1 (last step)."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def ema_update(target: Params, online: Mapping[str, np.ndarray], tau: float) -> Params:
    """xi' = tau * xi + (1 - tau) * theta for every name in ``target``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {tau}")
    out = {}
    for k, xi in target.items():
        theta = online[k]
        if np.shape(theta) != np.shape(xi):
            raise ValueError(f"EMA shape mismatch for {k}: {np.shape(xi)} vs {np.shape(theta)}")
        out[k] = tau * xi + (1.0 - tau) * theta
    return out


@dataclass
class EmaState:
    params: Params
    tau_base: float = 0.996
    tau: float = 0.996
    step: int = 0

    @classmethod
    def from_online(cls, online: Params, tau_base: float) -> EmaState:
        return cls({k: online[k].copy() for k in target_names(online)}, tau_base, tau_base, 0)

    def update(self, online: Params, tau: float) -> None:
        if not self.tau_base <= tau <= 1.0:
            raise ValueError(f"EMA momentum {tau} outside [{self.tau_base}, 1]")
        self.params = ema_update(self.params, online, tau)
        self.tau = tau
        self.step += 1


# ---------------------------------------------------------------------------
# key queue


class FeatureQueue:
    """Fixed-capacity FIFO of unit-norm keys backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim))
        self.cursor = 0
        self.size = 0

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator) -> FeatureQueue:
        q = cls(capacity, dim)
        keys = rng.standard_normal((capacity, dim))
        q.push(keys / np.linalg.norm(keys, axis=1, keepdims=True))
        return q

    def __len__(self) -> int:
        return self.size

    @property
    def keys(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self._buf[: self.size].copy()
        return np.concatenate([self._buf[self.cursor :], self._buf[: self.cursor]])

    def push(self, keys: np.ndarray) -> FeatureQueue:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        b = keys.shape[0]
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        if b > self.capacity:
            raise ValueError(f"cannot push {b} keys into a queue of capacity {self.capacity}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("queue keys must be unit-normalized")
        idx = (self.cursor + np.arange(b)) % self.capacity
        self._buf[idx] = keys
        self.cursor = int((self.cursor + b) % self.capacity)
        self.size = min(self.size + b, self.capacity)
        return self

    def state(self) -> tuple[np.ndarray, int, int]:
        return self._buf.copy(), self.cursor, self.size

    @classmethod
    def from_state(cls, buf: np.ndarray, cursor: int, size: int) -> FeatureQueue:
        q = cls(buf.shape[0], buf.shape[1])
        q._buf = np.array(buf, dtype=np.float64)
        q.cursor = int(cursor)
        q.size = int(size)
        return q


@dataclass
class ModelState:
    dims: ModelDims
    online: Params
    ema: EmaState | None = None
    queue: FeatureQueue | None = None
    running: Params = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        dims: ModelDims,
        rng: np.random.Generator,
        *,
        ema_tau_base: float | None = None,
        queue_capacity: int | None = None,
    ) -> ModelState:
        online = init_params(dims, rng)
        ema = EmaState.from_online(online, ema_tau_base) if ema_tau_base is not None else None
        queue = FeatureQueue.random(queue_capacity, dims.dz, rng) if queue_capacity else None
        return cls(dims, online, ema, queue, init_running_stats(online))
