"""Deterministic synthetic lathe data with a known error model.

Machining error is driven by latent tool wear ``w = index * wear_rate``, the spindle
speed and a per-configuration offset. Wear shows up in the signals three ways: the
spindle harmonics grow, the broadband floor rises, and a tool-resonance band drifts
upward. Motor currents rise with wear as well.

The three suites mirror the roles of the factory datasets: one long pretraining
run with 14 configuration changes, a different tool coating (harmonic gain changed)
over two epochs, and a different workpiece material (resonance band changed) over
three epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal_io import SplitEntry, WorkpieceSample, save_dataset, write_split
from .tensor import ConfigError

STREAM_SYNTH = 0x5147
CONTROLLER_HZ = 16
VIB_POSITION_GAIN = (1.0, 0.8, 0.6)


@dataclass
class SynthConfig:
    seed: int = 0
    n_workpieces: int = 347
    n_cuts: int = 3
    sr: int = 2048
    c1: int = 6
    c2: int = 3
    wear_rate: float = 1 / 347
    # (start, stop) half-open workpiece index range -> RPM
    spindle_rpm_schedule: list = field(default_factory=lambda: [(0, 347, 1900.0)])
    # (start index, error offset mm, harmonic-gain multiplier); first start must be 0
    config_shifts: list = field(default_factory=lambda: [(0, 0.0, 1.0)])
    noise_std: float = 0.0004
    label_quantum_mm: float = 0.001
    # error model
    base_mm: float = 0.002
    k1_wear_mm: float = 0.012
    k2_rpm_mm: float = 0.008
    rpm_ref: float = 1900.0
    # signal model
    alpha_harmonic: float = 1.5
    beta_noise: float = 1.0
    gamma_current: float = 0.6
    harmonic_amp_g: float = 0.5
    noise_amp_g: float = 0.2
    resonance_hz: float = 300.0
    resonance_drift_hz: float = 120.0
    resonance_width_hz: float = 15.0
    resonance_amp_g: float = 0.3
    resonance_gain: float = 1.0

    def __post_init__(self):
        self.spindle_rpm_schedule = [(int(a), int(b), float(r)) for a, b, r in self.spindle_rpm_schedule]
        self.config_shifts = [(int(s), float(o), float(g)) for s, o, g in self.config_shifts]
        self.validate()

    def validate(self) -> None:
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.label_quantum_mm <= 0:
            raise ConfigError("label_quantum_mm must be > 0")
        if not 0 < self.c2 < self.c1:
            raise ConfigError("need 0 < C2 < C1")
        if self.sr & (self.sr - 1) or self.sr < CONTROLLER_HZ:
            raise ConfigError("sampling rate must be a power of two >= 16")
        ranges = sorted(self.spindle_rpm_schedule)
        if not ranges or ranges[0][0] != 0 or ranges[-1][1] < self.n_workpieces:
            raise ConfigError("RPM schedule must cover every workpiece index")
        for (a0, b0, _), (a1, _, _) in zip(ranges, ranges[1:]):
            if b0 != a1:
                raise ConfigError("RPM schedule ranges must be disjoint and contiguous")
        starts = [s for s, _, _ in self.config_shifts]
        if not starts or starts[0] != 0 or starts != sorted(set(starts)):
            raise ConfigError("config shift starts must be strictly increasing from 0")

    def rpm(self, index: int) -> float:
        for a, b, r in self.spindle_rpm_schedule:
            if a <= index < b:
                return r
        raise ConfigError(f"no RPM scheduled for workpiece {index}")

    def epoch(self, index: int) -> int:
        return sum(1 for s, _, _ in self.config_shifts if s <= index) - 1

    def epoch_starts(self) -> list[int]:
        return [s for s, _, _ in self.config_shifts]

    def shift(self, index: int) -> tuple[float, float]:
        _, offset, gain = self.config_shifts[self.epoch(index)]
        return offset, gain


def clean_label(cfg: SynthConfig, index: int) -> float:
    """Noise-free, unquantised machining error (mm)."""
    w = index * cfg.wear_rate
    offset, _ = cfg.shift(index)
    return cfg.base_mm + cfg.k1_wear_mm * w + cfg.k2_rpm_mm * (cfg.rpm(index) - cfg.rpm_ref) / cfg.rpm_ref + offset


def quantize(value: float, quantum: float) -> float:
    return float(np.round(value / quantum) * quantum)


def _band_noise(rng, sr: int, center: float, width: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(sr))
    f = np.arange(spec.size)
    spec *= np.exp(-0.5 * ((f - center) / width) ** 2)
    band = np.fft.irfft(spec, n=sr)
    return band / max(band.std(), 1e-12)


def _cut(cfg: SynthConfig, rng, w: float, rpm: float, gain: float, depth: float) -> np.ndarray:
    sr = cfg.sr
    t = np.arange(sr) / sr
    f0 = rpm / 60.0
    out = np.empty((sr, cfg.c1))
    harm_amp = cfg.harmonic_amp_g * (1 + cfg.alpha_harmonic * w) * gain * depth
    noise_amp = cfg.noise_amp_g * (1 + cfg.beta_noise * w)
    res_amp = cfg.resonance_amp_g * (1 + w) * cfg.resonance_gain * depth
    res_center = cfg.resonance_hz + cfg.resonance_drift_hz * w
    for ch in range(cfg.c2):
        pg = VIB_POSITION_GAIN[ch % len(VIB_POSITION_GAIN)]
        phase = rng.uniform(0, 2 * np.pi, 3)
        sig = sum(harm_amp / h * np.sin(2 * np.pi * h * f0 * t + phase[h - 1]) for h in (1, 2, 3))
        sig = sig + noise_amp * rng.standard_normal(sr)
        sig = sig + res_amp * _band_noise(rng, sr, res_center, cfg.resonance_width_hz)
        out[:, ch] = pg * sig

    # controller-rate status signals, zero-order held up to SR
    n_ctl = CONTROLLER_HZ
    hold = sr // n_ctl
    wear_load = 1 + cfg.gamma_current * w
    status = [
        rpm + 2.0 * rng.standard_normal(n_ctl),
        8.0 * (rpm / cfg.rpm_ref) * wear_load * depth + 0.05 * rng.standard_normal(n_ctl),
        3.0 * wear_load * depth + 0.05 * rng.standard_normal(n_ctl),
    ]
    for j, ch in enumerate(range(cfg.c2, cfg.c1)):
        out[:, ch] = np.repeat(status[j % len(status)], hold)
    return out


def generate_workpiece(cfg: SynthConfig, index: int) -> WorkpieceSample:
    if not 0 <= index < cfg.n_workpieces:
        raise ConfigError(f"workpiece index {index} out of range")
    rng = np.random.default_rng([cfg.seed, STREAM_SYNTH, index, 0])
    label_rng = np.random.default_rng([cfg.seed, STREAM_SYNTH, index, 1])
    w = index * cfg.wear_rate
    rpm = cfg.rpm(index)
    _, gain = cfg.shift(index)
    cuts = []
    for n in range(cfg.n_cuts):
        # roughing passes remove more material than the final pass
        depth = 1.0 + 0.5 * (cfg.n_cuts - 1 - n) / cfg.n_cuts
        cuts.append(_cut(cfg, rng, w, rpm, gain, depth))
    noisy = clean_label(cfg, index) + (cfg.noise_std * label_rng.standard_normal() if cfg.noise_std else 0.0)
    return WorkpieceSample(
        id=f"wp{index:04d}",
        cuts=np.stack(cuts).astype(np.float32),
        label_mm=quantize(noisy, cfg.label_quantum_mm),
        config_epoch=cfg.epoch(index),
    )


def generate_dataset(cfg: SynthConfig) -> list[WorkpieceSample]:
    return [generate_workpiece(cfg, i) for i in range(cfg.n_workpieces)]


def noise_floor(cfg: SynthConfig, samples) -> float:
    """RMS of the injected label perturbation (noise + quantisation) over ``samples``."""
    idx = [int(wp.id[2:]) for wp in samples]
    diff = [np.float32(wp.label_mm) - clean_label(cfg, i) for wp, i in zip(samples, idx)]
    return float(np.sqrt(np.mean(np.square(diff))))


# suites ---------------------------------------------------------------------------------

PRETRAIN_EPOCH_STARTS = (0, 22, 44, 66, 88, 110, 132, 154, 176, 198, 220, 242, 264, 288, 297)
PRETRAIN_RPMS = (1900, 1500, 2300, 1100, 2700, 1700, 2100, 1300, 2500, 1800, 2200, 1200, 2600, 1600, 2400)
PRETRAIN_GAINS = (1.0, 0.95, 1.05, 0.9, 1.1, 1.0, 0.92, 1.08, 0.97, 1.03, 0.94, 1.06, 0.9, 1.1, 1.0)


def _schedule(starts, rpms, n):
    bounds = list(starts) + [max(n, starts[-1] + 1)]
    return [(bounds[i], bounds[i + 1], rpms[i]) for i in range(len(starts))]


def pretrain_suite(seed: int = 0, n_workpieces: int = 347, **overrides) -> SynthConfig:
    """347 workpieces over one tool life, 14 configuration changes, RPM 1100-2700."""
    return SynthConfig(
        seed=seed,
        n_workpieces=n_workpieces,
        wear_rate=1 / 347,
        spindle_rpm_schedule=_schedule(PRETRAIN_EPOCH_STARTS, PRETRAIN_RPMS, n_workpieces),
        config_shifts=[(s, 0.0, g) for s, g in zip(PRETRAIN_EPOCH_STARTS, PRETRAIN_GAINS)],
        **overrides,
    )


def adapt_tool_suite(seed: int = 0, **overrides) -> SynthConfig:
    """New tool coating: 87 workpieces, two epochs (39 + 48), stronger harmonics, shifted error."""
    starts = (0, 39)
    kw = dict(
        seed=seed + 1000,
        n_workpieces=87,
        wear_rate=1 / 347,
        spindle_rpm_schedule=_schedule(starts, (1600, 2200), 87),
        config_shifts=[(0, 0.004, 1.6), (39, 0.004, 1.6)],
    )
    kw.update(overrides)
    return SynthConfig(**kw)


def adapt_material_suite(seed: int = 0, **overrides) -> SynthConfig:
    """New workpiece material: 34 workpieces, three epochs (7 + 4 + 23), moved resonance band."""
    starts = (0, 7, 11)
    kw = dict(
        seed=seed + 2000,
        n_workpieces=34,
        wear_rate=4 / 347,
        spindle_rpm_schedule=_schedule(starts, (1000, 2100, 1500), 34),
        config_shifts=[(0, -0.003, 1.0), (7, -0.003, 1.0), (11, -0.0025, 1.1)],
        resonance_hz=450.0,
        resonance_gain=1.5,
    )
    kw.update(overrides)
    return SynthConfig(**kw)


SUITES = {
    "pretrain": pretrain_suite,
    "adapt-tool": adapt_tool_suite,
    "adapt-material": adapt_material_suite,
}


def shot_split(samples, shots: int = 2) -> list[SplitEntry]:
    """First ``shots`` workpieces of every configuration epoch are shots, the rest test."""
    seen: dict[int, int] = {}
    out = []
    for wp in samples:
        k = seen.get(wp.config_epoch, 0)
        seen[wp.config_epoch] = k + 1
        out.append(SplitEntry(wp.id, "shot" if k < shots else "test", wp.config_epoch))
    return out


def write_suite(out_dir, suite: str, seed: int = 0, n_workpieces: int | None = None, **overrides) -> dict[str, Path]:
    """Generate one suite into ``out_dir``; returns the written paths."""
    from .train import split_random, split_sequential

    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    if n_workpieces is not None:
        overrides["n_workpieces"] = n_workpieces
    cfg = SUITES[suite](seed, **overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(cfg)
    paths = {"dataset": out_dir / f"{suite}.dmds"}
    save_dataset(paths["dataset"], samples)
    if suite == "pretrain":
        paths["split_random"] = out_dir / f"{suite}.random.split"
        write_split(paths["split_random"], split_random(samples, 0.8, seed))
        paths["split_sequential"] = out_dir / f"{suite}.sequential.split"
        write_split(paths["split_sequential"], split_sequential(samples, 0.8))
    else:
        paths["split"] = out_dir / f"{suite}.split"
        write_split(paths["split"], shot_split(samples))
    return paths


def generate_pretrain_and_adapt_suites(out_dir, seed: int = 0, n_pretrain: int = 347) -> dict[str, dict]:
    return {
        "pretrain": write_suite(out_dir, "pretrain", seed, n_workpieces=n_pretrain),
        "adapt-tool": write_suite(out_dir, "adapt-tool", seed),
        "adapt-material": write_suite(out_dir, "adapt-material", seed),
    }


def with_quantum(cfg: SynthConfig, quantum: float) -> SynthConfig:
    """Same suite at a coarser measurement resolution (e.g. 0.01 mm)."""
    return replace(cfg, label_quantum_mm=quantum)
