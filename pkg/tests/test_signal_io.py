import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepmachining.signal_io import (
    CutSignal,
    DataError,
    FormatError,
    NormStats,
    SplitEntry,
    WorkpieceSample,
    apply_stats,
    dump_dataset,
    fit_stats,
    import_manifest,
    parse_dataset,
    read_split,
    rfft_abs,
    rfft_magnitude,
    save_dataset,
    load_dataset,
    select,
    write_split,
)
from deepmachining.tensor import ConfigError

from conftest import brute_dft_abs


def wp(i, n=2, sr=16, c=3, label=0.01, epoch=0, seed=0):
    rng = np.random.default_rng([seed, i])
    return WorkpieceSample(f"wp{i}", rng.standard_normal((n, sr, c)).astype(np.float32), label, epoch)


# spectra ------------------------------------------------------------------------------


def test_rfft_zero_and_pure_sine():
    sr = 2048
    assert np.all(rfft_abs(np.zeros((sr, 2)), 2) == 0)
    t = np.arange(sr) / sr
    x = np.sin(2 * np.pi * 32 * t)[:, None]
    mag = rfft_abs(x, 1)[:, 0]
    assert mag.shape == (sr // 2 + 1,)
    assert mag[32] == pytest.approx(sr / 2, rel=1e-9)
    others = np.delete(mag, 32)
    assert others.max() < 1e-8 * sr


@settings(max_examples=20, deadline=None)
@given(p=st.integers(1, 7), seed=st.integers(0, 9999))
def test_rfft_matches_brute_force_dft(p, seed):
    n = 2**p
    x = np.random.default_rng(seed).standard_normal((n, 2))
    got = rfft_abs(x, 2)
    for c in range(2):
        np.testing.assert_allclose(got[:, c], brute_dft_abs(x[:, c]), rtol=1e-9, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(p=st.integers(2, 9), seed=st.integers(0, 9999), a=st.floats(-10, 10))
def test_rfft_parseval_and_homogeneity(p, seed, a):
    n = 2**p
    x = np.random.default_rng(seed).standard_normal((n, 1))
    mag = rfft_abs(x, 1)[:, 0]
    # one-sided Parseval: interior bins count twice
    energy = (mag[0] ** 2 + mag[-1] ** 2 + 2 * np.sum(mag[1:-1] ** 2)) / n
    assert energy == pytest.approx(np.sum(x**2), rel=1e-9)
    np.testing.assert_allclose(rfft_abs(a * x, 1), abs(a) * rfft_abs(x, 1), rtol=1e-9, atol=1e-9)


def test_rfft_rejects_non_power_of_two():
    with pytest.raises(ConfigError):
        rfft_abs(np.zeros((100, 1)), 1)


def test_rfft_magnitude_is_log_compressed_vibration_only():
    cut = CutSignal(np.random.default_rng(0).standard_normal((64, 6)))
    spec = rfft_magnitude(cut, 3)
    assert spec.shape == (33, 3) and spec.dtype == np.float32
    np.testing.assert_allclose(spec, np.log1p(rfft_abs(cut.samples, 3)), rtol=1e-6)


# normalisation ----------------------------------------------------------------------


def test_fit_stats_example():
    cuts = np.array([[[1.0, 10.0], [3.0, 10.0]]], dtype=np.float32)  # one cut, SR=2, C1=2
    s = fit_stats([WorkpieceSample("a", cuts, 0.5), WorkpieceSample("b", cuts, 1.5)], 1)
    np.testing.assert_allclose(s.time_mean, [2, 10])
    np.testing.assert_allclose(s.time_std[0], 1)
    assert s.time_std[1] == 1e-8  # floored, constant channel
    assert (s.label_mean, s.label_std) == (1.0, 0.5)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 6), offset=st.floats(-1e3, 1e3), seed=st.integers(0, 999))
def test_fit_stats_matches_pooled_numpy(n, offset, seed):
    data = [wp(i, sr=16, seed=seed) for i in range(n)]
    for d in data:
        d.cuts = d.cuts + np.float32(offset)
    s = fit_stats(data, 2)
    pooled = np.concatenate([d.cuts.reshape(-1, 3).astype(np.float64) for d in data])
    np.testing.assert_allclose(s.time_mean, pooled.mean(0), rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(s.time_std, np.maximum(pooled.std(0), 1e-8), rtol=1e-6)
    spec = np.concatenate([rfft_magnitude(d.cuts, 2).reshape(-1, 2).astype(np.float64) for d in data])
    np.testing.assert_allclose(s.spec_mean, spec.mean(0), rtol=1e-6)
    x, xs = apply_stats(data[0], s)
    assert x.shape == (2, 16, 3) and xs.shape == (2, 9, 2)


def test_norm_stats_round_trip():
    s = fit_stats([wp(0), wp(1, label=0.02)], 2)
    t = NormStats.from_dict(s.to_dict())
    for k in ("time_mean", "time_std", "spec_mean", "spec_std"):
        np.testing.assert_array_equal(getattr(s, k), getattr(t, k))
    assert t.label_std == s.label_std


def test_fit_stats_empty():
    with pytest.raises(DataError):
        fit_stats([], 2)


# DMDS container ----------------------------------------------------------------------


def test_dmds_round_trip_byte_identical(tmp_path):
    data = [wp(0, epoch=3), wp(1, n=3, label=-0.25), wp(2, n=1)]
    raw = dump_dataset(data)
    back = parse_dataset(raw)
    assert dump_dataset(back) == raw
    for a, b in zip(data, back):
        assert (a.id, a.config_epoch, a.n_cuts) == (b.id, b.config_epoch, b.n_cuts)
        np.testing.assert_array_equal(a.cuts, b.cuts)
        assert np.float32(a.label_mm) == b.label_mm
    save_dataset(tmp_path / "x.dmds", data)
    assert (tmp_path / "x.dmds").read_bytes() == raw
    assert len(load_dataset(tmp_path / "x.dmds")) == 3


@settings(max_examples=20, deadline=None)
@given(
    ids=st.lists(st.text(min_size=0, max_size=8), min_size=0, max_size=4),
    labels=st.lists(st.floats(-1, 1, width=32), min_size=4, max_size=4),
)
def test_dmds_round_trip_property(ids, labels):
    data = [WorkpieceSample(i, np.full((1, 4, 2), k, np.float32), labels[k], k) for k, i in enumerate(ids)]
    raw = dump_dataset(data)
    assert dump_dataset(parse_dataset(raw)) == raw


def test_dmds_empty_is_header_only():
    raw = dump_dataset([])
    assert len(raw) == 16 and raw[:4] == b"DMDS"
    assert parse_dataset(raw) == []


def test_dmds_corrupt_length_field_reports_offset():
    raw = bytearray(dump_dataset([wp(0)]))
    raw[16:18] = struct.pack("<H", 60000)  # id length now runs past the end
    with pytest.raises(FormatError) as info:
        parse_dataset(bytes(raw))
    assert info.value.offset == 18


def test_dmds_bad_magic_version_and_truncation():
    raw = dump_dataset([wp(0)])
    with pytest.raises(FormatError) as info:
        parse_dataset(b"XXXX" + raw[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError) as info:
        parse_dataset(raw[:4] + struct.pack("<I", 2) + raw[8:])
    assert info.value.offset == 4
    with pytest.raises(FormatError):
        parse_dataset(raw[:-1])
    with pytest.raises(FormatError):
        parse_dataset(raw + b"\0")


def test_workpiece_validation():
    with pytest.raises(DataError):
        WorkpieceSample("x", np.zeros((0, 4, 2)), 0.0)
    with pytest.raises(DataError):
        WorkpieceSample("x", np.zeros((1, 4, 2)), float("nan"))
    with pytest.raises(DataError):
        CutSignal(np.array([[np.inf]]))


# text interchange -------------------------------------------------------------------


def _csv(path, arr):
    np.savetxt(path, arr, delimiter=",")


def test_import_manifest_windows(tmp_path):
    long = np.arange(20, dtype=np.float64)[:, None] * np.ones((1, 2))
    _csv(tmp_path / "c1.csv", long)
    _csv(tmp_path / "c2.csv", long + 100)
    (tmp_path / "m.txt").write_text("# comment\nwpA 0.012 1 c1.csv c2.csv\n")
    [a] = import_manifest(tmp_path / "m.txt", sr=8)
    assert (a.id, a.config_epoch, a.n_cuts, a.sr) == ("wpA", 1, 2, 8)
    np.testing.assert_array_equal(a.cuts[0, :, 0], np.arange(6, 14))
    [b] = import_manifest(tmp_path / "m.txt", sr=8, window="trailing")
    np.testing.assert_array_equal(b.cuts[1, :, 0], np.arange(112, 120))
    with pytest.raises(DataError):
        import_manifest(tmp_path / "m.txt", sr=32)
    with pytest.raises(ConfigError):
        import_manifest(tmp_path / "m.txt", sr=8, window="left")


# split manifests ---------------------------------------------------------------------


def test_split_round_trip_and_select(tmp_path):
    entries = [SplitEntry("wp0", "train", 0), SplitEntry("wp1", "shot", 1), SplitEntry("wp2", "test", 1)]
    write_split(tmp_path / "s", entries)
    assert read_split(tmp_path / "s") == entries
    data = [wp(0), wp(1), wp(2)]
    assert [d.id for d in select(data, entries, ("shot", "test"))] == ["wp1", "wp2"]
    (tmp_path / "bad").write_text("wp0,validation,0\n")
    with pytest.raises(DataError):
        read_split(tmp_path / "bad")
    with pytest.raises(DataError):
        select(data[:1], entries, "test")
