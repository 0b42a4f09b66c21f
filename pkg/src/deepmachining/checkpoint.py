"""DMCK checkpoint container: JSON metadata plus named little-endian f32 tensors."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DeepMachining, ModelConfig, has_adapters, param_counts, param_shapes
from .signal_io import FormatError, NormStats, _Reader
from .tensor import ConfigError, Tensor

DMCK_MAGIC = b"DMCK"
DMCK_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: NormStats | None = None
    trainable: list[str] = field(default_factory=list)
    regime: str = "init"

    @classmethod
    def from_model(cls, model: DeepMachining, stats=None, trainable=None, regime="init") -> "Checkpoint":
        params = {n: t.data.astype(np.float32, copy=True) for n, t in model.params.items()}
        names = sorted(params) if trainable is None else sorted(trainable)
        return cls(model.cfg, params, stats, names, regime)

    def model(self) -> DeepMachining:
        return DeepMachining(self.config, {n: Tensor(a.copy(), name=n) for n, a in self.params.items()})

    @property
    def adapters(self) -> bool:
        return has_adapters(self.params)

    def counts(self) -> tuple[int, int, float]:
        tensors = {n: Tensor(a) for n, a in self.params.items()}
        return param_counts(tensors, self.trainable)

    def metadata(self) -> dict:
        total, trainable, fraction = self.counts()
        return {
            "config": self.config.to_dict(),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "trainable": sorted(self.trainable),
            "regime": self.regime,
            "adapters": self.adapters,
            "param_counts": {"total": total, "trainable": trainable, "fraction": fraction},
        }


def dump_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(DMCK_MAGIC)
    buf.write(struct.pack("<I", DMCK_VERSION))
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dump_checkpoint(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != DMCK_MAGIC:
        raise FormatError("bad magic, not a DMCK file", 0)
    (version,) = r.unpack("<I", "version")
    if version != DMCK_VERSION:
        raise FormatError(f"unsupported DMCK version {version}", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", meta_at) from None
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        n = int(np.prod(dims)) if ndim else 1
        raw = r.take(4 * n, f"payload of {name}")
        if name in params:
            raise FormatError(f"duplicate tensor {name!r}", at)
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor", r.pos)

    expected = param_shapes(cfg, adapters=has_adapters(params))
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))[:3]
        extra = sorted(set(params) - set(expected))[:3]
        raise ConfigError(f"checkpoint tensors do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise ConfigError(f"tensor {name!r} has shape {params[name].shape}, config expects {shape}")
    stats = None if meta.get("stats") is None else NormStats.from_dict(meta["stats"])
    return Checkpoint(cfg, params, stats, list(meta.get("trainable", [])), meta.get("regime", "init"))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
