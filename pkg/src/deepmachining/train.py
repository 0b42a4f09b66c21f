"""Loss, AdamW, pretraining and two-shot fine-tuning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .model import DeepMachining, ModelConfig, finetune_mask, has_adapters, insert_adapters, pretrain_mask
from .signal_io import DataError, NormStats, SplitEntry, WorkpieceSample, apply_stats, fit_stats
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)

STREAM_SHUFFLE = 0x5348
STREAM_DROPOUT = 0x4450
STREAM_SPLIT = 0x5350


class OptimError(ArithmeticError):
    pass


def mse_loss(y_hat: Tensor, y, denom: int | None = None) -> Tensor:
    """Mean squared error; ``denom`` overrides the divisor (for micro-batch accumulation)."""
    y = np.asarray(y, dtype=y_hat.data.dtype).reshape(y_hat.shape)
    n = y.size if denom is None else denom
    if y.size == 0 or n == 0:
        raise DataError("mse_loss on an empty batch")
    diff = y_hat.data - y
    out = Tensor._wrap(np.asarray(np.sum(diff * diff) / n, dtype=diff.dtype).reshape(1))

    def backward(g):
        T._acc(y_hat, g.reshape(()) * (2 / n) * diff)

    return T._record(out, (y_hat,), backward)


# optimiser ------------------------------------------------------------------------


def decays(name: str) -> bool:
    """Decoupled weight decay hits weight matrices and kernels only."""
    return name.endswith(".w")


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], mask, state: OptimState) -> None:
    """One AdamW update of every tensor in ``mask``, in place. Frozen tensors are never touched."""
    names = sorted(mask)
    for n in names:
        g = params[n].grad
        if g is not None and not np.isfinite(g).all():
            raise OptimError(f"non-finite gradient for {n}")
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    for n in names:
        p = params[n]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if n not in state.m:
            state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        m, v = state.m[n], state.v[n]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = p.data
        if state.weight_decay and decays(n):
            new = new - (state.lr * state.weight_decay) * new
        p.data = (new - state.lr * upd).astype(p.data.dtype, copy=False)


# plans and splits --------------------------------------------------------------------


@dataclass
class TrainPlan:
    regime: str = "pretrain"
    lr: float = 1e-3
    batch_size: int = 512
    epochs: int = 512
    seed: int = 0
    shuffle: bool = True
    weight_decay: float = 0.01
    micro_batch: int = 8

    def __post_init__(self):
        if self.regime not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.micro_batch < 1:
            raise ConfigError("batch_size and micro_batch must be >= 1, epochs >= 0")

    @classmethod
    def pretrain(cls, **kw) -> "TrainPlan":
        return cls(**{"regime": "pretrain", "lr": 1e-3, "batch_size": 512, "epochs": 512, **kw})

    @classmethod
    def finetune(cls, **kw) -> "TrainPlan":
        return cls(**{"regime": "finetune", "lr": 1e-5, "batch_size": 32, "epochs": 64, **kw})


def split_random(samples: Sequence[WorkpieceSample], ratio: float = 0.8, seed: int = 0) -> list[SplitEntry]:
    n = len(samples)
    n_train = int(math.floor(ratio * n))
    order = np.random.default_rng([seed, STREAM_SPLIT]).permutation(n)
    train = set(order[:n_train].tolist())
    return [SplitEntry(wp.id, "train" if i in train else "test", wp.config_epoch) for i, wp in enumerate(samples)]


def split_sequential(samples: Sequence[WorkpieceSample], ratio: float = 0.8, shots: int = 2) -> list[SplitEntry]:
    """First ``ratio`` of the run trains; later configuration epochs also donate their first shots."""
    n_train = int(math.floor(ratio * len(samples)))
    out = []
    first_seen: dict[int, int] = {}
    for i, wp in enumerate(samples):
        if wp.config_epoch not in first_seen:
            first_seen[wp.config_epoch] = i
        if i < n_train:
            role = "train"
        elif first_seen[wp.config_epoch] >= n_train and i - first_seen[wp.config_epoch] < shots:
            role = "shot"
        else:
            role = "test"
        out.append(SplitEntry(wp.id, role, wp.config_epoch))
    return out


# batching ------------------------------------------------------------------------------


@dataclass
class Prepared:
    """Normalised inputs and scaled targets, ready for batching."""

    x_time: list[np.ndarray]
    x_freq: list[np.ndarray]
    y: np.ndarray  # normalised labels
    n_cuts: np.ndarray


def prepare(samples: Sequence[WorkpieceSample], stats: NormStats) -> Prepared:
    xt, xf = [], []
    for wp in samples:
        a, b = apply_stats(wp, stats)
        xt.append(a)
        xf.append(b)
    y = (np.array([wp.label_mm for wp in samples], dtype=np.float64) - stats.label_mean) / stats.label_std
    return Prepared(xt, xf, y.astype(np.float32), np.array([wp.n_cuts for wp in samples]))


def micro_batches(idx: Sequence[int], n_cuts: np.ndarray, size: int) -> list[list[int]]:
    """Chunk ``idx`` into groups sharing a cut count (stable order) of at most ``size``."""
    groups: dict[int, list[int]] = {}
    for i in idx:
        groups.setdefault(int(n_cuts[i]), []).append(int(i))
    out = []
    for n in sorted(groups):
        g = groups[n]
        out.extend(g[j : j + size] for j in range(0, len(g), size))
    return out


def _stack(data: Prepared, idx: list[int]) -> tuple[Tensor, Tensor]:
    return Tensor(np.stack([data.x_time[i] for i in idx])), Tensor(np.stack([data.x_freq[i] for i in idx]))


def check_compatible(cfg: ModelConfig, samples: Sequence[WorkpieceSample]) -> None:
    for wp in samples:
        if wp.sr != cfg.sr:
            raise ConfigError(
                f"workpiece {wp.id!r} sampled at {wp.sr} Hz but the model expects {cfg.sr} Hz; "
                "pretraining and fine-tuning sampling rates must be identical"
            )
        if wp.channels != cfg.c1:
            raise ConfigError(f"workpiece {wp.id!r} has {wp.channels} channels, model expects {cfg.c1}")


# training loop --------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    wall_ms: float


def fit(
    model: DeepMachining,
    data: Prepared,
    mask: set[str],
    plan: TrainPlan,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Mini-batch AdamW on the scaled targets. Batches larger than the data become one full batch."""
    params = model.params
    for n, t in params.items():
        t.requires_grad = n in mask
        t.grad = None
    state = OptimState(lr=plan.lr, weight_decay=plan.weight_decay)
    n = len(data.y)
    if n == 0:
        raise DataError("no training samples")
    shuffle_rng = np.random.default_rng([plan.seed, STREAM_SHUFFLE])
    history = []
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n) if plan.shuffle else np.arange(n)
        total = 0.0
        for b, start in enumerate(range(0, n, plan.batch_size)):
            batch = order[start : start + plan.batch_size]
            for k, mb in enumerate(micro_batches(batch, data.n_cuts, plan.micro_batch)):
                rng = np.random.default_rng([plan.seed, STREAM_DROPOUT, epoch, b, k])
                xt, xf = _stack(data, mb)
                g = T.Graph("train", rng=rng)
                with g:
                    loss = mse_loss(model.forward(xt, xf), data.y[mb], denom=len(batch))
                g.backward(loss)
                total += loss.item() * len(batch)
            adamw_step(params, mask, state)
            for t in params.values():
                t.grad = None
        entry = EpochLog(epoch, total / n, (time.perf_counter() - t0) * 1000)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    for t in params.values():
        t.requires_grad = False
    return history


class MetricsLog:
    """Append-only ``epoch,loss,wall_ms`` file, preceded by ``#`` header lines."""

    def __init__(self, path, header: dict | None = None):
        self.path = Path(path) if path is not None else None
        if self.path is not None and header:
            with self.path.open("a") as fh:
                for k in sorted(header):
                    fh.write(f"# {k}={header[k]}\n")

    def __call__(self, entry: EpochLog) -> None:
        log.info("epoch %d loss %.6f (%.0f ms)", entry.epoch, entry.loss, entry.wall_ms)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(f"{entry.epoch},{entry.loss:.9g},{entry.wall_ms:.1f}\n")


def pretrain(
    dataset: Sequence[WorkpieceSample],
    model_cfg: ModelConfig,
    plan: TrainPlan | None = None,
    metrics_path=None,
    header: dict | None = None,
) -> Checkpoint:
    """Fit normalisation on ``dataset`` and train every parameter from a fresh init."""
    plan = plan or TrainPlan.pretrain()
    if plan.regime != "pretrain":
        raise ConfigError("pretrain() needs a pretrain plan")
    if not dataset:
        raise DataError("empty pretraining set")
    check_compatible(model_cfg, dataset)
    stats = fit_stats(dataset, model_cfg.c2)
    model = DeepMachining(model_cfg)
    mask = pretrain_mask(model.params)
    fit(model, prepare(dataset, stats), mask, plan, MetricsLog(metrics_path, header))
    return Checkpoint.from_model(model, stats, mask, regime="pretrain")


def finetune_two_shot(
    ckpt: Checkpoint,
    shots: Sequence[WorkpieceSample],
    plan: TrainPlan | None = None,
    metrics_path=None,
    header: dict | None = None,
) -> Checkpoint:
    """Insert adapters if needed and train only adapters, biases and the head on ``shots``.

    Normalisation statistics come from the pretrained checkpoint and are never refit.
    """
    plan = plan or TrainPlan.finetune()
    if plan.regime != "finetune":
        raise ConfigError("finetune_two_shot() needs a finetune plan")
    if not shots:
        raise DataError("fine-tuning needs at least one shot")
    if ckpt.stats is None:
        raise ConfigError("checkpoint carries no normalisation statistics")
    check_compatible(ckpt.config, shots)
    model = ckpt.model()
    if not has_adapters(model.params):
        model = DeepMachining(model.cfg, insert_adapters(model.params, model.cfg))
    mask = finetune_mask(model.params)
    frozen = {n: model.params[n].data.copy() for n in model.params if n not in mask}
    fit(model, prepare(shots, ckpt.stats), mask, plan, MetricsLog(metrics_path, header))
    for n, before in frozen.items():
        if not np.array_equal(before, model.params[n].data):
            raise AssertionError(f"frozen tensor {n} changed during fine-tuning")
    return Checkpoint.from_model(model, ckpt.stats, mask, regime="finetune")
