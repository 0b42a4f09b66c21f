"""The DeepMachining network: dual signal encoders, stage-2 D-Inception, projection head.

Parameters live in a flat ``{name: Tensor}`` dict. Names encode their role:

* ``*.w`` weight matrices / conv kernels, ``*.b`` bias vectors
* ``*.gamma`` / ``*.beta`` layer-norm scale / offset
* anything under ``*.adapter.*`` belongs to a fine-tuning adapter
* ``head.*`` is the projection head
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

STEM_KERNEL = 11
STEM_STRIDE = 5
DILATION = 2
ENCODERS = ("time", "freq")

Params = dict[str, Tensor]


@dataclass
class ModelConfig:
    d: int = 40
    r_attn: int = 4
    r_adapter: int = 8
    stacks: int = 3
    kernel_schedule: tuple[int, ...] = (11, 7, 5, 3)
    stage2_s: int = 3
    dropout_p: float = 0.1
    sr: int = 2048
    c1: int = 6
    c2: int = 3
    n_max: int = 16
    seed: int = 0

    def __post_init__(self):
        self.kernel_schedule = tuple(int(k) for k in self.kernel_schedule)
        self.validate()

    def validate(self) -> None:
        d = self.d
        if d % 4 or d % self.r_attn:
            raise ConfigError(f"d={d} must be divisible by 4 and by r_attn={self.r_attn}")
        if d % self.r_adapter or (4 * d) % self.r_adapter:
            raise ConfigError(f"d={d} and 4d must be divisible by r_adapter={self.r_adapter}")
        if (4 * d) % self.r_attn:
            raise ConfigError("4d must be divisible by r_attn")
        if self.stacks < 1:
            raise ConfigError("stacks must be >= 1")
        if len(self.kernel_schedule) != self.stacks + 1:
            raise ConfigError("kernel_schedule needs stacks + 1 entries")
        if any(k < 1 for k in self.kernel_schedule) or self.stage2_s < 1:
            raise ConfigError("kernel sizes must be >= 1")
        if self.sr < 2 or self.sr & (self.sr - 1):
            raise ConfigError(f"sampling rate must be a power of two, got {self.sr}")
        if not 0 < self.c2 < self.c1:
            raise ConfigError("need 0 < C2 < C1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")

    @property
    def spec_len(self) -> int:
        return self.sr // 2 + 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel_schedule"] = list(self.kernel_schedule)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


def encoder_lengths(L: int, cfg: ModelConfig) -> list[int]:
    """Sequence lengths through one encoder: input, after stem, after each downsampling."""
    out = [L, T.conv_output_length(L, STEM_KERNEL, STEM_STRIDE)]
    for _ in range(cfg.stacks):
        out.append(out[-1] // 2)
    return out


# parameter layout ---------------------------------------------------------------


def _inception_shapes(prefix: str, c: int, s: int, r_attn: int) -> dict[str, tuple]:
    q = c // 4
    shapes = {}
    for br in ("b1", "b2a", "b3a", "b4"):
        shapes[f"{prefix}.{br}.w"] = (1, c, q)
        shapes[f"{prefix}.{br}.b"] = (q,)
    for br in ("b2b", "b3b"):
        shapes[f"{prefix}.{br}.w"] = (s, q, q)
        shapes[f"{prefix}.{br}.b"] = (q,)
    shapes[f"{prefix}.ln.gamma"] = (c,)
    shapes[f"{prefix}.ln.beta"] = (c,)
    shapes[f"{prefix}.fc.w"] = (c, c)
    shapes[f"{prefix}.fc.b"] = (c,)
    shapes[f"{prefix}.ca.fc0.w"] = (2 * c, c // r_attn)
    shapes[f"{prefix}.ca.fc0.b"] = (c // r_attn,)
    shapes[f"{prefix}.ca.fc1.w"] = (c // r_attn, c)
    shapes[f"{prefix}.ca.fc1.b"] = (c,)
    shapes[f"{prefix}.ta.w"] = (1, 2, 1)
    shapes[f"{prefix}.ta.b"] = (1,)
    return shapes


def _down_shapes(prefix: str, c: int) -> dict[str, tuple]:
    return {
        f"{prefix}.fc0.w": (c, 4 * c),
        f"{prefix}.fc0.b": (4 * c,),
        f"{prefix}.ln.gamma": (4 * c,),
        f"{prefix}.ln.beta": (4 * c,),
        f"{prefix}.fc1.w": (4 * c, c),
        f"{prefix}.fc1.b": (c,),
    }


def _adapter_shapes(prefix: str, c: int, r: int) -> dict[str, tuple]:
    return {
        f"{prefix}.adapter.fc0.w": (c, c // r),
        f"{prefix}.adapter.fc0.b": (c // r,),
        f"{prefix}.adapter.fc1.w": (c // r, c),
        f"{prefix}.adapter.fc1.b": (c,),
    }


def adapter_sites(cfg: ModelConfig) -> list[tuple[str, int]]:
    """(block prefix, channel width) of every D-Inception and Downsampling block."""
    sites = []
    for enc in ENCODERS:
        for i in range(cfg.stacks + 1):
            sites.append((f"{enc}.inc{i}", cfg.d))
            if i < cfg.stacks:
                sites.append((f"{enc}.down{i}", cfg.d))
    sites.append(("stage2.inc", 4 * cfg.d))
    return sites


def param_shapes(cfg: ModelConfig, adapters: bool = False) -> dict[str, tuple]:
    d = cfg.d
    shapes: dict[str, tuple] = {}
    for enc, C in zip(ENCODERS, (cfg.c1, cfg.c2)):
        shapes[f"{enc}.stem.proj.w"] = (C, d)
        shapes[f"{enc}.stem.proj.b"] = (d,)
        shapes[f"{enc}.stem.ln.gamma"] = (d,)
        shapes[f"{enc}.stem.ln.beta"] = (d,)
        shapes[f"{enc}.stem.conv.w"] = (STEM_KERNEL, d, d)
        shapes[f"{enc}.stem.conv.b"] = (d,)
        for i, s in enumerate(cfg.kernel_schedule):
            shapes.update(_inception_shapes(f"{enc}.inc{i}", d, s, cfg.r_attn))
            if i < cfg.stacks:
                shapes.update(_down_shapes(f"{enc}.down{i}", d))
    shapes.update(_inception_shapes("stage2.inc", 4 * d, cfg.stage2_s, cfg.r_attn))
    shapes["head.w"] = (8 * d, 1)
    shapes["head.b"] = (1,)
    if adapters:
        for prefix, c in adapter_sites(cfg):
            shapes.update(_adapter_shapes(prefix, c, cfg.r_adapter))
    return shapes


def _init_tensor(name: str, shape: tuple, seed: int) -> np.ndarray:
    if name.endswith(".b") or name.endswith(".beta") or name.endswith("adapter.fc1.w"):
        return np.zeros(shape, np.float32)
    if name.endswith(".gamma"):
        return np.ones(shape, np.float32)
    fan_in = int(np.prod(shape[:-1]))
    bound = np.sqrt(6.0 / fan_in)
    # a stream per tensor name keeps init independent of construction order
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(cfg: ModelConfig) -> Params:
    """He-style scaled-uniform weights, zero biases, unit/zero layer-norm affine."""
    return {
        name: Tensor(_init_tensor(name, shape, cfg.seed), name=name)
        for name, shape in param_shapes(cfg).items()
    }


def has_adapters(params: Mapping[str, Tensor]) -> bool:
    return any(".adapter." in n for n in params)


def insert_adapters(params: Params, cfg: ModelConfig) -> Params:
    """Return a copy of ``params`` with an adapter in every D-Inception and Downsampling block.

    The up-projection starts at zero so the network computes exactly the same function.
    """
    if has_adapters(params):
        raise ConfigError("adapters already inserted")
    out = dict(params)
    for prefix, c in adapter_sites(cfg):
        if c % cfg.r_adapter:
            raise ConfigError(f"channel width {c} not divisible by r_adapter={cfg.r_adapter}")
        for name, shape in _adapter_shapes(prefix, c, cfg.r_adapter).items():
            out[name] = Tensor(_init_tensor(name, shape, cfg.seed), name=name)
    return out


def is_bias(name: str) -> bool:
    return name.endswith(".b") or name.endswith(".beta")


def finetune_mask(params: Mapping[str, Tensor]) -> set[str]:
    """Adapters, every bias/offset vector, and the projection head."""
    return {n for n in params if ".adapter." in n or is_bias(n) or n.startswith("head.")}


def pretrain_mask(params: Mapping[str, Tensor]) -> set[str]:
    return set(params)


def param_counts(params: Mapping[str, Tensor], mask=None) -> tuple[int, int, float]:
    total = sum(int(t.data.size) for t in params.values())
    trainable = total if mask is None else sum(int(params[n].data.size) for n in mask)
    return total, trainable, trainable / total if total else 0.0


# blocks -------------------------------------------------------------------------


def _p(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ConfigError(f"missing parameter {name!r}") from None


def adapter_forward(F: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """F + W1(W0(F)); no activation between the two projections."""
    h = T.linear(F, _p(params, f"{prefix}.adapter.fc0.w"), _p(params, f"{prefix}.adapter.fc0.b"))
    h = T.linear(h, _p(params, f"{prefix}.adapter.fc1.w"), _p(params, f"{prefix}.adapter.fc1.b"))
    return T.add(F, h)


def stem_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str, dropout_p: float = 0.0) -> Tensor:
    """Channel projection, dropout, layer norm, strided conv (k=11, stride 5), GELU."""
    w = _p(params, f"{prefix}.proj.w")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"stem {prefix}: expected {w.shape[0]} input channels, got {x.shape[-1]}")
    h = T.linear(x, w, _p(params, f"{prefix}.proj.b"))
    h = T.dropout(h, dropout_p)
    h = T.layer_norm(h, _p(params, f"{prefix}.ln.gamma"), _p(params, f"{prefix}.ln.beta"))
    h = T.conv1d(h, _p(params, f"{prefix}.conv.w"), _p(params, f"{prefix}.conv.b"), stride=STEM_STRIDE)
    return T.gelu(h)


def channel_attention(F: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Per-channel gate in (0, 1), shape [..., 1, c]."""
    pooled = T.concat([T.global_pool(F, "avg"), T.global_pool(F, "max")], axis=-1)
    h = T.gelu(T.linear(pooled, _p(params, f"{prefix}.fc0.w"), _p(params, f"{prefix}.fc0.b")))
    h = T.linear(h, _p(params, f"{prefix}.fc1.w"), _p(params, f"{prefix}.fc1.b"))
    m = T.sigmoid(h)
    return T.reshape(m, (*m.shape[:-1], 1, m.shape[-1]))


def temporal_attention(F: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Per-position gate in (0, 1), shape [..., L, 1]."""
    pooled = T.concat([T.channel_pool(F, "avg"), T.channel_pool(F, "max")], axis=-1)
    h = T.conv1d(pooled, _p(params, f"{prefix}.w"), _p(params, f"{prefix}.b"))
    return T.sigmoid(h)


def d_inception_forward(
    F_in: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    s: int,
    dropout_p: float = 0.0,
    adapters_enabled: bool | None = None,
    maps: dict | None = None,
) -> Tensor:
    """Four-branch dilated inception block with channel + temporal attention and a residual.

    ``maps``, when given, receives the attention maps under keys ``"channel"``/``"temporal"``.
    """
    c = F_in.shape[-1]
    if c % 4:
        raise ConfigError(f"D-Inception width {c} not divisible by 4")
    if adapters_enabled is None:
        adapters_enabled = f"{prefix}.adapter.fc0.w" in params

    def conv(x, br, **kw):
        return T.conv1d(x, _p(params, f"{prefix}.{br}.w"), _p(params, f"{prefix}.{br}.b"), **kw)

    b1 = conv(F_in, "b1")
    b2 = conv(conv(F_in, "b2a"), "b2b")
    b3 = conv(conv(F_in, "b3a"), "b3b", dilation=DILATION)
    b4 = conv(T.maxpool1d(F_in, s, stride=1, padding="same"), "b4")
    h = T.concat([b1, b2, b3, b4], axis=-1)
    h = T.dropout(h, dropout_p)
    h = T.layer_norm(h, _p(params, f"{prefix}.ln.gamma"), _p(params, f"{prefix}.ln.beta"))
    F = T.gelu(T.linear(h, _p(params, f"{prefix}.fc.w"), _p(params, f"{prefix}.fc.b")))
    if adapters_enabled:
        F = adapter_forward(F, params, prefix)
    mc = channel_attention(F, params, f"{prefix}.ca")
    F1 = T.mul(F, mc)
    mt = temporal_attention(F1, params, f"{prefix}.ta")
    F2 = T.mul(F1, mt)
    if maps is not None:
        maps["channel"], maps["temporal"] = mc.data, mt.data
    return T.add(F2, F_in)


def downsampling_forward(
    F: Tensor, params: Mapping[str, Tensor], prefix: str, adapters_enabled: bool | None = None
) -> Tensor:
    """Max-pool (2, stride 2), expand to 4c, layer norm, project back to c."""
    if F.shape[-2] < 2:
        raise ShapeError(f"downsampling needs length >= 2, got {F.shape[-2]}")
    if adapters_enabled is None:
        adapters_enabled = f"{prefix}.adapter.fc0.w" in params
    h = T.maxpool1d(F, 2, stride=2, padding="valid")
    h = T.linear(h, _p(params, f"{prefix}.fc0.w"), _p(params, f"{prefix}.fc0.b"))
    h = T.layer_norm(h, _p(params, f"{prefix}.ln.gamma"), _p(params, f"{prefix}.ln.beta"))
    h = T.linear(h, _p(params, f"{prefix}.fc1.w"), _p(params, f"{prefix}.fc1.b"))
    if adapters_enabled:
        h = adapter_forward(h, params, prefix)
    return h


def gap_gmp(x: Tensor, mask=None) -> Tensor:
    return T.concat([T.global_pool(x, "avg", mask), T.global_pool(x, "max", mask)], axis=-1)


def signal_encoder_forward(x: Tensor, params: Mapping[str, Tensor], enc: str, cfg: ModelConfig) -> Tensor:
    """One stream of one (batch of) cut(s): [..., L, C] -> [..., 2d]."""
    h = stem_forward(x, params, f"{enc}.stem", cfg.dropout_p)
    for i, s in enumerate(cfg.kernel_schedule):
        h = d_inception_forward(h, params, f"{enc}.inc{i}", s, cfg.dropout_p)
        if i < cfg.stacks:
            h = downsampling_forward(h, params, f"{enc}.down{i}")
    return gap_gmp(h)


def stage2_forward(H: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, mask=None) -> Tensor:
    """D-Inception over the cut sequence [..., N, 4d], then GAP || GMP over cuts -> [..., 8d]."""
    N = H.shape[-2]
    if N == 0:
        raise T.MaskError("workpiece has no cuts")
    h = d_inception_forward(H, params, "stage2.inc", min(cfg.stage2_s, N), cfg.dropout_p)
    return gap_gmp(h, mask)


def projection_head(h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return T.linear(h, _p(params, "head.w"), _p(params, "head.b"))


def model_forward(x_time: Tensor, x_freq: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Batched forward. ``x_time`` is [B, N, SR, C1], ``x_freq`` is [B, N, SR/2+1, C2]; returns [B].

    Whether dropout is active follows the enclosing :class:`~deepmachining.tensor.Graph`.
    """
    if x_time.data.ndim != 4 or x_freq.data.ndim != 4:
        raise ShapeError("model inputs must be [B, N, L, C]")
    B, N = x_time.shape[:2]
    if x_freq.shape[:2] != (B, N):
        raise ShapeError("time and spectral inputs disagree on batch/cut counts")
    if x_time.shape[2:] != (cfg.sr, cfg.c1) or x_freq.shape[2:] != (cfg.spec_len, cfg.c2):
        raise ShapeError(
            f"expected per-cut inputs {(cfg.sr, cfg.c1)} and {(cfg.spec_len, cfg.c2)}, "
            f"got {x_time.shape[2:]} and {x_freq.shape[2:]}"
        )
    ht = signal_encoder_forward(T.reshape(x_time, (B * N, cfg.sr, cfg.c1)), params, "time", cfg)
    hf = signal_encoder_forward(T.reshape(x_freq, (B * N, cfg.spec_len, cfg.c2)), params, "freq", cfg)
    H = T.reshape(T.concat([ht, hf], axis=-1), (B, N, 4 * cfg.d))
    y = projection_head(stage2_forward(H, params, cfg), params)
    return T.reshape(y, (B,))


@dataclass
class DeepMachining:
    """Config plus parameters; thin convenience wrapper around the block functions."""

    cfg: ModelConfig = field(default_factory=ModelConfig)
    params: Params | None = None

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg)

    @property
    def adapters(self) -> bool:
        return has_adapters(self.params)

    def with_adapters(self) -> "DeepMachining":
        return DeepMachining(self.cfg, insert_adapters(self.params, self.cfg))

    def forward(self, x_time, x_freq) -> Tensor:
        if not isinstance(x_time, Tensor):
            x_time = Tensor(x_time)
        if not isinstance(x_freq, Tensor):
            x_freq = Tensor(x_freq)
        return model_forward(x_time, x_freq, self.params, self.cfg)

    __call__ = forward

    def predict(self, x_time, x_freq) -> np.ndarray:
        """Infer-mode forward (no recording, no dropout)."""
        with T.Graph("infer"):
            return self.forward(x_time, x_freq).data.copy()

    def astype(self, dtype) -> "DeepMachining":
        with T.precision(dtype):
            params = {n: Tensor(t.data.astype(dtype), name=n) for n, t in self.params.items()}
        return DeepMachining(self.cfg, params)
