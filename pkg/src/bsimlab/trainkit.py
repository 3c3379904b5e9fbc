"""Deterministic SimCLR / MoCo / BYOL training loops with mixed-instance losses.

Randomness is split into independent streams spawned from the run seed:
model initialization, view augmentation and lambda/mixing. Batch order for
epoch ``e`` comes from its own generator seeded by ``(seed, e)``. Because
the augmentation stream never depends on the mixing strategy, a run with
``force_lambda=1`` and ``mix="cutmix"`` sees exactly the views of the
matching ``mix="none"`` run.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Literal, Optional

import numpy as np

from . import losses as L
from . import ndgrad as nd
from .augment import AugPolicy, BetaParams, augment_view, mix, sample_lambdas
from .datagen import LabeledImageSet
from .models import (
    EmaState,
    FeatureQueue,
    ModelDims,
    ModelState,
    as_constants,
    as_leaves,
    encode,
    images_to_batch,
    predict,
    project,
    tau_schedule,
    update_running_stats,
)

MAGIC = b"BSIM1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    method: Literal["simclr", "moco", "byol"] = "simclr"
    mix: Literal["cutmix", "mixup", "none"] = "cutmix"
    alpha: float = 1.0
    temperature: float = 0.2
    w1: float = 1.0
    w2: float = 0.0
    batch: int = 32
    epochs: int = 10
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    queue: int = 64
    key_momentum: float = 0.99
    tau_base: float = 0.98
    byol_variant: Literal["v0", "v1"] = "v1"
    sim_denominator: Literal["standard", "bsim"] = "standard"
    force_lambda: Optional[float] = None
    seed: int = 7
    # view policy
    crop_min: float = 0.5
    flip_p: float = 0.5
    jitter: float = 0.4
    gray_p: float = 0.2
    # model size
    conv_widths: tuple[int, ...] = (32, 64)
    conv_strides: tuple[int, ...] = (2, 2, 2)
    dh: int = 512
    proj_hidden: int = 128
    dz: int = 32
    pred_hidden: int = 128
    # data
    data: str = "synth"
    synth_classes: int = 4
    synth_train_per_class: int = 250
    synth_test_per_class: int = 50
    synth_size: int = 32
    data_seed: int = 7
    wall_time: bool = False

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        self.conv_strides = tuple(self.conv_strides)
        if self.mix == "none":
            self.w1, self.w2 = 0.0, 1.0
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ValueError(msg)

        need(self.method in ("simclr", "moco", "byol"), f"unknown method {self.method!r}")
        need(self.mix in ("cutmix", "mixup", "none"), f"unknown mix strategy {self.mix!r}")
        need(self.alpha > 0, "alpha must be > 0")
        need(self.temperature > 0, "temperature must be > 0")
        need(0 <= self.w1 <= 1 and 0 <= self.w2 <= 1, "WBSIM weights must lie in [0, 1]")
        need(self.w1 + self.w2 > 0, "at least one WBSIM weight must be nonzero")
        need(self.batch >= 4 and self.batch % 2 == 0, "batch size must be even and >= 4")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(self.lr > 0, "learning rate must be > 0")
        need(0 <= self.momentum < 1, "momentum must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight decay must be >= 0")
        need(self.warmup_epochs >= 0, "warmup_epochs must be >= 0")
        need(self.queue >= self.batch, "queue capacity must be >= batch size")
        need(0 <= self.key_momentum <= 1, "key_momentum must lie in [0, 1]")
        need(0 <= self.tau_base <= 1, "tau_base must lie in [0, 1]")
        need(self.byol_variant in ("v0", "v1"), f"unknown BYOL variant {self.byol_variant!r}")
        need(self.sim_denominator in ("standard", "bsim"), "sim_denominator must be standard|bsim")
        need(
            self.force_lambda is None or 0 <= self.force_lambda <= 1,
            "force_lambda must lie in [0, 1]",
        )
        need(0 < self.crop_min <= 1, "crop_min must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            conv_widths=self.conv_widths, conv_strides=self.conv_strides, dh=self.dh, proj_hidden=self.proj_hidden,
            dz=self.dz, pred_hidden=self.pred_hidden, predictor=self.method == "byol",
        )

    @property
    def policy(self) -> AugPolicy:
        return AugPolicy(scale=(self.crop_min, 1.0), flip_p=self.flip_p,
                         jitter=self.jitter, gray_p=self.gray_p)


# ---------------------------------------------------------------------------
# optimization


def sgd_update(params, grads, buffers, lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v + g + weight_decay*p;  p <- p - lr*v.

    Returns new (params, buffers) dicts; inputs are not modified.
    """
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {k}")
        v = buffers.get(k)
        v = g + weight_decay * p if v is None else momentum * v + g + weight_decay * p
        new_v[k] = v
        new_p[k] = p - lr * v
    return new_p, new_v


@dataclass
class OptimizerState:
    buffers: dict = field(default_factory=dict)
    step: int = 0


def cosine_lr(step: int, total: int, lr0: float, warmup_steps: int = 0) -> float:
    """Linear warmup 0 -> lr0, then cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup_steps:
        return lr0 * step / warmup_steps
    if total == warmup_steps:
        return lr0
    progress = (step - warmup_steps) / (total - warmup_steps)
    return lr0 * (math.cos(math.pi * progress) + 1.0) / 2.0


def pair_indices(n: int) -> list[tuple[int, int]]:
    """Batch pairing i <-> n-1-i; requires even n so nothing pairs with itself."""
    if n < 2 or n % 2:
        raise ValueError(f"batch size must be even, got {n}")
    return [(i, n - 1 - i) for i in range(n)]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict[str, np.ndarray]
    rng: dict
    meta: dict = field(default_factory=dict)


def _pack_header(ck: Checkpoint) -> bytes:
    header = {"config": ck.config, "step": ck.step, "rng": ck.rng, "meta": ck.meta}
    return json.dumps(header, sort_keys=True).encode("utf-8")


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    header = _pack_header(ck)
    out.append(struct.pack("<I", len(header)))
    out.append(header)
    out.append(struct.pack("<I", len(ck.tensors)))
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name], dtype="<f8")
        bname = name.encode("utf-8")
        out.append(struct.pack("<H", len(bname)))
        out.append(bname)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError("truncated checkpoint payload")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if len(raw) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise ValueError("not a BSIM checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = arr
    if r.pos != len(raw):
        raise ValueError("trailing bytes after checkpoint payload")
    return Checkpoint(header["config"], header["step"], tensors, header["rng"], header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    lambda_mean: float
    wall_ms: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class StepViews:
    """Images and effective lambdas for one step (all (N, H, W, C))."""

    mixed_prime: np.ndarray
    plain_dprime: np.ndarray
    mixed_dprime: np.ndarray | None
    plain_prime: np.ndarray
    lambdas: np.ndarray
    pairing: np.ndarray


class Trainer:
    """Single-writer owner of model, optimizer and RNG state for one run."""

    def __init__(self, config: TrainConfig, dataset: LabeledImageSet):
        config.validate()
        if len(dataset) < config.batch:
            raise ValueError(f"dataset of {len(dataset)} images is smaller than one batch")
        self.config = config
        self.images = dataset.images
        self.steps_per_epoch = len(dataset) // config.batch
        self.total_steps = self.steps_per_epoch * config.epochs
        self.warmup_steps = self.steps_per_epoch * config.warmup_epochs
        if self.warmup_steps >= self.total_steps:
            self.warmup_steps = 0
        ss_init, ss_aug, ss_mix = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.Generator(np.random.PCG64(ss_init))
        self.rng_aug = np.random.Generator(np.random.PCG64(ss_aug))
        self.rng_mix = np.random.Generator(np.random.PCG64(ss_mix))
        self.model = ModelState.create(
            config.dims,
            init_rng,
            ema_tau_base=(config.tau_base if config.method == "byol"
                          else config.key_momentum if config.method == "moco" else None),
            queue_capacity=config.queue if config.method == "moco" else None,
        )
        self.opt = OptimizerState()
        self.step = 0
        self.pairing = np.array([j for _, j in pair_indices(config.batch)])
        self._perm_epoch = -1
        self._perm: np.ndarray | None = None

    # -- state -------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        t = {f"online/{k}": v for k, v in self.model.online.items()}
        t.update({f"opt/{k}": v for k, v in self.opt.buffers.items()})
        t.update({f"running/{k}": v for k, v in self.model.running.items()})
        meta = {"opt_step": self.opt.step}
        if self.model.ema is not None:
            ema = self.model.ema
            t.update({f"target/{k}": v for k, v in ema.params.items()})
            meta["ema"] = {"tau_base": ema.tau_base, "tau": ema.tau, "step": ema.step}
        if self.model.queue is not None:
            buf, cursor, size = self.model.queue.state()
            t["queue/keys"] = buf
            meta["queue"] = {"cursor": cursor, "size": size}
        rng = {"aug": self.rng_aug.bit_generator.state, "mix": self.rng_mix.bit_generator.state}
        return Checkpoint(self.config.to_dict(), self.step, t, rng, meta)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, dataset: LabeledImageSet) -> Trainer:
        tr = cls(TrainConfig.from_dict(ck.config), dataset)
        tr.step = ck.step
        tr.model.online = {k[7:]: v.copy() for k, v in ck.tensors.items() if k.startswith("online/")}
        tr.model.running = {k[8:]: v.copy() for k, v in ck.tensors.items() if k.startswith("running/")}
        tr.opt = OptimizerState(
            {k[4:]: v.copy() for k, v in ck.tensors.items() if k.startswith("opt/")},
            ck.meta.get("opt_step", 0),
        )
        if "ema" in ck.meta:
            e = ck.meta["ema"]
            params = {k[7:]: v.copy() for k, v in ck.tensors.items() if k.startswith("target/")}
            tr.model.ema = EmaState(params, e["tau_base"], e["tau"], e["step"])
        if "queue" in ck.meta:
            q = ck.meta["queue"]
            tr.model.queue = FeatureQueue.from_state(ck.tensors["queue/keys"], q["cursor"], q["size"])
        tr.rng_aug.bit_generator.state = ck.rng["aug"]
        tr.rng_mix.bit_generator.state = ck.rng["mix"]
        return tr

    # -- data --------------------------------------------------------------

    def _batch_indices(self, step: int) -> np.ndarray:
        epoch, b = divmod(step, self.steps_per_epoch)
        if epoch != self._perm_epoch:
            rng = np.random.default_rng([self.config.seed, 1_000_003, epoch])
            self._perm = rng.permutation(len(self.images))
            self._perm_epoch = epoch
        n = self.config.batch
        return self._perm[b * n : (b + 1) * n]

    def _views(self, x: np.ndarray, dual_mix: bool) -> StepViews:
        cfg = self.config
        n = len(x)
        pol = cfg.policy
        partner = x[self.pairing]
        aug = self.rng_aug
        a = np.stack([augment_view(img, pol, aug) for img in x])
        b = np.stack([augment_view(img, pol, aug) for img in partner])
        c = np.stack([augment_view(img, pol, aug) for img in x])
        d = np.stack([augment_view(img, pol, aug) for img in partner]) if dual_mix else None

        if cfg.mix == "none":
            return StepViews(a, c, c if dual_mix else None, a, np.ones(n), self.pairing)

        if cfg.force_lambda is not None:
            lam_req = np.full(n, float(cfg.force_lambda))
        else:
            lam_req = sample_lambdas(BetaParams(cfg.alpha), self.rng_mix, n)
        mixed_p, lam_eff = [], np.empty(n)
        for i in range(n):
            r = mix(cfg.mix, a[i], b[i], lam_req[i], self.rng_mix)
            mixed_p.append(r.image)
            lam_eff[i] = r.lambda_effective
        mixed_d = None
        if dual_mix:
            mixed_d = []
            for i in range(n):
                r = mix(cfg.mix, c[i], d[i], lam_req[i], self.rng_mix)
                # equal requested lambda gives equal box area, hence equal effective lambda
                assert r.lambda_effective == lam_eff[i]
                mixed_d.append(r.image)
            mixed_d = np.stack(mixed_d)
        return StepViews(np.stack(mixed_p), c, mixed_d, a, lam_eff, self.pairing)

    # -- forward passes ----------------------------------------------------

    def _embed(self, params, images: np.ndarray, stats_out: dict | None = None) -> nd.Tensor:
        h = encode(params, images_to_batch(images), self.config.conv_strides, stats_out=stats_out)
        return project(params, h)

    def _loss_simclr(self, leaves, v: StepViews) -> L.LossValue:
        cfg = self.config
        n = cfg.batch
        need_four = cfg.w1 > 0 or cfg.sim_denominator == "bsim"
        if need_four:
            z = self._embed(leaves, np.concatenate(
                [v.mixed_prime, v.plain_dprime, v.mixed_dprime, v.plain_prime]), self._bn_stats)
            zm1, zp2, zm2, zp1 = (z[k * n : (k + 1) * n] for k in range(4))
        else:
            z = self._embed(leaves, np.concatenate([v.plain_prime, v.plain_dprime]), self._bn_stats)
            zp1, zp2 = z[:n], z[n:]
        bsim = sim = None
        if cfg.w1 > 0:
            bsim = L.simclr_bsim_loss(L.BatchEmbeddings(zm1, zp2, zm2, zp1, v.lambdas, v.pairing),
                                      cfg.temperature)
        if cfg.w2 > 0:
            if cfg.sim_denominator == "bsim":
                # the mixed streams hold plain views when mix == "none"
                sim = L.simclr_paired_sim_loss(
                    L.BatchEmbeddings(zm1, zp2, zm2, zp1, np.ones(n), v.pairing), cfg.temperature)
            else:
                sim = L.nt_xent_baseline(zp1, zp2, cfg.temperature)
        return L.wbsim_combine(bsim, sim, cfg.w1, cfg.w2)

    def _loss_moco(self, leaves, v: StepViews) -> tuple[L.LossValue, np.ndarray]:
        cfg = self.config
        n = cfg.batch
        target = as_constants(self.model.ema.params)
        keys = nd.l2_normalize(self._embed(target, v.plain_dprime)).data
        queue = self.model.queue.keys
        streams = []
        if cfg.w1 > 0:
            streams.append(v.mixed_prime)
        if cfg.w2 > 0:
            streams.append(v.mixed_prime if cfg.mix == "none" else v.plain_prime)
        q = nd.l2_normalize(self._embed(leaves, np.concatenate(streams), self._bn_stats))
        bsim = sim = None
        off = 0
        if cfg.w1 > 0:
            bsim = L.moco_bsim_batch(q[:n], keys, keys[v.pairing], queue, v.lambdas, cfg.temperature)
            off = n
        if cfg.w2 > 0:
            extra = keys[v.pairing] if cfg.sim_denominator == "bsim" else None
            sim = L.moco_infonce(q[off : off + n], keys, queue, cfg.temperature, extra_negatives=extra)
        return L.wbsim_combine(bsim, sim, cfg.w1, cfg.w2), keys

    def _loss_byol(self, leaves, v: StepViews) -> L.LossValue:
        cfg = self.config
        n = cfg.batch
        target = as_constants(self.model.ema.params)
        zt = self._embed(target, np.concatenate([v.plain_dprime, v.plain_prime]))
        zt2, zt1 = zt.data[:n], zt.data[n:]
        streams = []
        if cfg.w1 > 0:
            streams += [v.mixed_prime, v.mixed_dprime]
        if cfg.w2 > 0:
            if cfg.mix == "none":
                streams += [v.mixed_prime, v.mixed_dprime]
            else:
                streams += [v.plain_prime, v.plain_dprime]
        p = predict(leaves, self._embed(leaves, np.concatenate(streams), self._bn_stats))
        bsim = sim = None
        off = 0
        j = v.pairing
        if cfg.w1 > 0:
            fn = L.byol_bsim_v1 if cfg.byol_variant == "v1" else L.byol_bsim_v0
            bsim = L.symmetrize_byol(
                fn,
                (p[:n], zt2, zt2[j], v.lambdas),
                (p[n : 2 * n], zt1, zt1[j], v.lambdas),
            )
            off = 2 * n
        if cfg.w2 > 0:
            sim = L.symmetrize_byol(
                L.byol_loss, (p[off : off + n], zt2), (p[off + n : off + 2 * n], zt1)
            )
        return L.wbsim_combine(bsim, sim, cfg.w1, cfg.w2)

    # -- one step ----------------------------------------------------------

    def train_step(self) -> MetricsRecord:
        if self.step >= self.total_steps:
            raise RuntimeError("training already finished")
        t0 = time.perf_counter()
        cfg = self.config
        idx = self._batch_indices(self.step)
        x = self.images[idx]
        dual = cfg.method in ("simclr", "byol")
        v = self._views(x, dual)
        leaves = as_leaves(self.model.online)
        self._bn_stats = {}
        keys = None
        if cfg.method == "simclr":
            loss = self._loss_simclr(leaves, v)
        elif cfg.method == "moco":
            loss, keys = self._loss_moco(leaves, v)
        else:
            loss = self._loss_byol(leaves, v)
        grads = nd.backward(loss.scalar, wrt=list(leaves.values()))
        grads = {k: grads[t] for k, t in leaves.items()}
        lr = cosine_lr(self.step, self.total_steps, cfg.lr, self.warmup_steps)
        self.model.online, self.opt.buffers = sgd_update(
            self.model.online, grads, self.opt.buffers, lr, cfg.momentum, cfg.weight_decay
        )
        self.opt.step += 1
        self.model.running = update_running_stats(self.model.running, self._bn_stats)
        if cfg.method == "moco":
            self.model.ema.update(self.model.online, cfg.key_momentum)
            self.model.queue.push(keys)
        elif cfg.method == "byol":
            tau = tau_schedule(self.step, self.total_steps, cfg.tau_base)
            self.model.ema.update(self.model.online, tau)
        rec = MetricsRecord(
            step=self.step,
            epoch=self.step // self.steps_per_epoch,
            loss=loss.value,
            lr=lr,
            lambda_mean=float(np.mean(v.lambdas)),
            wall_ms=(time.perf_counter() - t0) * 1e3 if cfg.wall_time else None,
        )
        self.step += 1
        return rec

    def run(self, max_steps: int | None = None) -> Iterator[MetricsRecord]:
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        while self.step < stop:
            yield self.train_step()


def train(
    config: TrainConfig,
    dataset: LabeledImageSet,
    *,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    metrics_path=None,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Run (or resume) training; returns the final checkpoint and the metrics."""
    trainer = Trainer.from_checkpoint(resume, dataset) if resume else Trainer(config, dataset)
    records = []
    sink = open(metrics_path, "a" if resume else "w") if metrics_path else None
    try:
        for rec in trainer.run(max_steps):
            records.append(rec)
            if sink:
                sink.write(rec.to_json() + "\n")
            if on_record:
                on_record(rec)
    finally:
        if sink:
            sink.close()
    return trainer.checkpoint(), records


def _train_method(method: str):
    def run(config: TrainConfig, dataset: LabeledImageSet, **kwargs):
        if config.method != method:
            raise ValueError(f"config.method is {config.method!r}, expected {method!r}")
        return train(config, dataset, **kwargs)

    run.__name__ = f"train_{method}_bsim"
    run.__doc__ = f"Train with method={method!r}; see :func:`train`."
    return run


train_simclr_bsim = _train_method("simclr")
train_moco_bsim = _train_method("moco")
train_byol_bsim = _train_method("byol")


def epoch_losses(records: list[MetricsRecord]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in records:
        by_epoch.setdefault(r.epoch, []).append(r.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def online_params(ck: Checkpoint) -> dict[str, np.ndarray]:
    return {k[7:]: v for k, v in ck.tensors.items() if k.startswith("online/")}


def running_stats(ck: Checkpoint) -> dict[str, np.ndarray]:
    return {k[8:]: v for k, v in ck.tensors.items() if k.startswith("running/")}
