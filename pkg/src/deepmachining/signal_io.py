"""Workpiece data model, DMDS container, spectra and input normalisation."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ConfigError

DMDS_MAGIC = b"DMDS"
DMDS_VERSION = 1
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class CutSignal:
    """One second of multichannel signal, [SR, C1]; vibration channels first."""

    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise DataError(f"cut must be [SR, C], got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise DataError("cut contains non-finite samples")

    @property
    def sr(self) -> int:
        return self.samples.shape[0]


@dataclass
class WorkpieceSample:
    id: str
    cuts: np.ndarray  # [N, SR, C1] float32
    label_mm: float
    config_epoch: int = 0

    def __post_init__(self):
        cuts = self.cuts
        if isinstance(cuts, (list, tuple)):
            cuts = np.stack([c.samples if isinstance(c, CutSignal) else np.asarray(c) for c in cuts])
        self.cuts = np.asarray(cuts, dtype=np.float32)
        if self.cuts.ndim != 3 or self.cuts.shape[0] < 1:
            raise DataError(f"workpiece {self.id!r}: cuts must be [N>=1, SR, C1], got {self.cuts.shape}")
        if not np.isfinite(self.label_mm):
            raise DataError(f"workpiece {self.id!r}: label is not finite")

    @property
    def n_cuts(self) -> int:
        return self.cuts.shape[0]

    @property
    def sr(self) -> int:
        return self.cuts.shape[1]

    @property
    def channels(self) -> int:
        return self.cuts.shape[2]

    def cut(self, n: int) -> CutSignal:
        return CutSignal(self.cuts[n])


# spectra ------------------------------------------------------------------------------


def _check_pow2(sr: int) -> None:
    if sr < 2 or sr & (sr - 1):
        raise ConfigError(f"sampling rate must be a power of two, got {sr}")


def rfft_abs(samples: np.ndarray, n_vib: int) -> np.ndarray:
    """|X_k| for k = 0..SR/2 of the first ``n_vib`` channels; [..., SR/2+1, n_vib], float64."""
    samples = np.asarray(samples)
    _check_pow2(samples.shape[-2])
    return np.abs(np.fft.rfft(samples[..., :n_vib].astype(np.float64), axis=-2))


def rfft_magnitude(cut, n_vib: int) -> np.ndarray:
    """log1p-compressed magnitude spectrum of the vibration channels, [SR/2+1, n_vib] float32.

    Also accepts a stacked [N, SR, C] array and returns [N, SR/2+1, n_vib].
    """
    samples = cut.samples if isinstance(cut, CutSignal) else cut
    return np.log1p(rfft_abs(samples, n_vib)).astype(np.float32)


# normalisation ----------------------------------------------------------------------


@dataclass
class NormStats:
    time_mean: np.ndarray
    time_std: np.ndarray
    spec_mean: np.ndarray
    spec_std: np.ndarray
    label_mean: float = 0.0
    label_std: float = 1.0

    def __post_init__(self):
        for name in ("time_mean", "time_std", "spec_mean", "spec_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32).reshape(-1))
        self.time_std = np.maximum(self.time_std, np.float32(STD_FLOOR))
        self.spec_std = np.maximum(self.spec_std, np.float32(STD_FLOOR))
        self.label_mean = float(np.float32(self.label_mean))
        self.label_std = float(max(np.float32(self.label_std), np.float32(STD_FLOOR)))

    @property
    def c1(self) -> int:
        return self.time_mean.size

    @property
    def c2(self) -> int:
        return self.spec_mean.size

    def to_dict(self) -> dict:
        return {
            "time_mean": [float(v) for v in self.time_mean],
            "time_std": [float(v) for v in self.time_std],
            "spec_mean": [float(v) for v in self.spec_mean],
            "spec_std": [float(v) for v in self.spec_std],
            "label_mean": self.label_mean,
            "label_std": self.label_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(**data)

    @classmethod
    def identity(cls, c1: int, c2: int) -> "NormStats":
        return cls(np.zeros(c1), np.ones(c1), np.zeros(c2), np.ones(c2))


def fit_stats(dataset: Sequence[WorkpieceSample], n_vib: int) -> NormStats:
    """Per-channel mean/std over every cut (time domain) and every spectral bin, plus label stats."""
    if not dataset:
        raise DataError("cannot fit normalisation statistics on an empty dataset")
    c1 = dataset[0].channels
    t_sum = np.zeros(c1)
    t_sq = np.zeros(c1)
    s_sum = np.zeros(n_vib)
    s_sq = np.zeros(n_vib)
    t_n = s_n = 0
    for wp in dataset:
        if wp.channels != c1:
            raise DataError(f"workpiece {wp.id!r} has {wp.channels} channels, expected {c1}")
        x = wp.cuts.astype(np.float64).reshape(-1, c1)
        t_sum += x.sum(axis=0)
        t_n += x.shape[0]
        spec = rfft_magnitude(wp.cuts, n_vib).astype(np.float64).reshape(-1, n_vib)
        s_sum += spec.sum(axis=0)
        s_n += spec.shape[0]
    t_mean = t_sum / t_n
    s_mean = s_sum / s_n
    # second pass around the mean; avoids cancellation in E[x^2] - E[x]^2
    for wp in dataset:
        x = wp.cuts.astype(np.float64).reshape(-1, c1)
        t_sq += ((x - t_mean) ** 2).sum(axis=0)
        spec = rfft_magnitude(wp.cuts, n_vib).astype(np.float64).reshape(-1, n_vib)
        s_sq += ((spec - s_mean) ** 2).sum(axis=0)
    labels = np.array([wp.label_mm for wp in dataset], dtype=np.float64)
    return NormStats(
        t_mean,
        np.sqrt(t_sq / t_n),
        s_mean,
        np.sqrt(s_sq / s_n),
        label_mean=labels.mean(),
        label_std=labels.std(),
    )


def apply_stats(sample: WorkpieceSample, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """Z-scored model inputs for one workpiece: ([N, SR, C1], [N, SR/2+1, C2]) float32."""
    if sample.channels != stats.c1 or stats.c2 >= stats.c1:
        raise DataError(f"workpiece {sample.id!r} has {sample.channels} channels; stats expect {stats.c1}")
    x = (sample.cuts - stats.time_mean) / stats.time_std
    spec = rfft_magnitude(sample.cuts, stats.c2)
    xs = (spec - stats.spec_mean) / stats.spec_std
    return x.astype(np.float32, copy=False), xs.astype(np.float32, copy=False)


# DMDS container ----------------------------------------------------------------------


def dump_dataset(samples: Iterable[WorkpieceSample]) -> bytes:
    samples = list(samples)
    buf = io.BytesIO()
    buf.write(DMDS_MAGIC)
    buf.write(struct.pack("<III", DMDS_VERSION, len(samples), 0))
    for wp in samples:
        ident = wp.id.encode("utf-8")
        n, sr, c1 = wp.cuts.shape
        buf.write(struct.pack("<H", len(ident)))
        buf.write(ident)
        buf.write(struct.pack("<fIHIH", wp.label_mm, wp.config_epoch, n, sr, c1))
        buf.write(np.ascontiguousarray(wp.cuts, dtype="<f4").tobytes())
    return buf.getvalue()


def save_dataset(path, samples: Iterable[WorkpieceSample]) -> None:
    Path(path).write_bytes(dump_dataset(samples))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_dataset(data: bytes) -> list[WorkpieceSample]:
    r = _Reader(data)
    if r.take(4, "magic") != DMDS_MAGIC:
        raise FormatError("bad magic, not a DMDS file", 0)
    (version,) = r.unpack("<I", "version")
    if version != DMDS_VERSION:
        raise FormatError(f"unsupported DMDS version {version}", 4)
    count, reserved = r.unpack("<II", "header")
    if reserved != 0:
        raise FormatError("reserved header word must be zero", 12)
    out = []
    for _ in range(count):
        start = r.pos
        (id_len,) = r.unpack("<H", "id length")
        try:
            ident = r.take(id_len, "id").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("workpiece id is not valid UTF-8", start + 2) from None
        fields_at = r.pos
        label, epoch, n, sr, c1 = r.unpack("<fIHIH", "workpiece header")
        if n < 1 or sr < 1 or c1 < 1:
            raise FormatError(f"workpiece {ident!r} has an empty shape ({n}, {sr}, {c1})", fields_at + 8)
        if out and (sr, c1) != (out[0].sr, out[0].channels):
            raise FormatError(f"workpiece {ident!r} shape ({sr}, {c1}) differs from the first workpiece", fields_at + 10)
        payload_at = r.pos
        raw = r.take(4 * n * sr * c1, "signal payload")
        cuts = np.frombuffer(raw, dtype="<f4").reshape(n, sr, c1).astype(np.float32)
        try:
            out.append(WorkpieceSample(ident, cuts, float(label), int(epoch)))
        except DataError as exc:
            raise FormatError(str(exc), payload_at) from None
    if r.pos != len(data):
        raise FormatError("trailing bytes after last workpiece", r.pos)
    return out


def load_dataset(path) -> list[WorkpieceSample]:
    return parse_dataset(Path(path).read_bytes())


# plain-text interchange ---------------------------------------------------------------


def import_manifest(path, sr: int, window: str = "centered") -> list[WorkpieceSample]:
    """Read a text manifest: ``id label_mm config_epoch cut1.csv [cut2.csv ...]`` per line.

    Each CSV holds one cut, one row per sample and one column per channel. Longer
    recordings are cut down to ``sr`` rows, either around the middle or at the end.
    """
    if window not in ("centered", "trailing"):
        raise ConfigError(f"window must be 'centered' or 'trailing', got {window!r}")
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 4:
            raise DataError(f"{path}:{lineno}: need id, label, epoch and at least one cut file")
        ident, label, epoch, files = parts[0], float(parts[1]), int(parts[2]), parts[3:]
        cuts = []
        for f in files:
            arr = np.loadtxt(path.parent / f, delimiter=",", dtype=np.float64, ndmin=2)
            if arr.shape[0] < sr:
                raise DataError(f"{f}: {arr.shape[0]} rows, need at least {sr}")
            start = (arr.shape[0] - sr) // 2 if window == "centered" else arr.shape[0] - sr
            cuts.append(arr[start : start + sr])
        out.append(WorkpieceSample(ident, np.stack(cuts), label, epoch))
    return out


# split manifests -------------------------------------------------------------------------


ROLES = ("train", "shot", "test")


@dataclass
class SplitEntry:
    id: str
    role: str
    epoch: int


def write_split(path, entries: Iterable[SplitEntry]) -> None:
    lines = [f"{e.id},{e.role},{e.epoch}" for e in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_split(path) -> list[SplitEntry]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 3 or parts[1] not in ROLES:
            raise DataError(f"{path}:{lineno}: expected 'id,role,epoch' with role in {ROLES}")
        out.append(SplitEntry(parts[0], parts[1], int(parts[2])))
    return out


def select(samples: Sequence[WorkpieceSample], entries: Sequence[SplitEntry], roles) -> list[WorkpieceSample]:
    roles = {roles} if isinstance(roles, str) else set(roles)
    wanted = [e.id for e in entries if e.role in roles]
    by_id = {wp.id: wp for wp in samples}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise DataError(f"split references unknown workpieces: {missing[:5]}")
    return [by_id[i] for i in wanted]
