"""Shared fixtures and independent oracles (naive loops, brute-force DFT, finite differences)."""

import math

import numpy as np
import pytest

from deepmachining.model import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(d=8, stacks=2, kernel_schedule=(5, 3, 3), sr=64, c1=4, c2=2, dropout_p=0.1, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def naive_conv1d(x, w, b=None, stride=1, dilation=1, padding="same"):
    """Direct triple loop over a single [L, Cin] signal; w is [k, Cin, Cout]."""
    L, cin = x.shape
    k, _, cout = w.shape
    span = (k - 1) * dilation + 1
    if padding == "same":
        L_out = math.ceil(L / stride)
        total = max((L_out - 1) * stride + span - L, 0)
        left = total // 2
    else:
        L_out = (L - span) // stride + 1
        left = 0
    out = np.zeros((L_out, cout))
    for t in range(L_out):
        for j in range(k):
            src = t * stride + j * dilation - left
            if 0 <= src < L:
                for ci in range(cin):
                    for co in range(cout):
                        out[t, co] += x[src, ci] * w[j, ci, co]
    if b is not None:
        out += b
    return out


def naive_maxpool(x, k, stride, padding="valid"):
    L, C = x.shape
    if padding == "same":
        L_out = math.ceil(L / stride)
        total = max((L_out - 1) * stride + k - L, 0)
        left = total // 2
    else:
        L_out = (L - k) // stride + 1
        left = 0
    out = np.full((L_out, C), -np.inf)
    for t in range(L_out):
        for j in range(k):
            src = t * stride + j - left
            if 0 <= src < L:
                out[t] = np.maximum(out[t], x[src])
    return out


def brute_dft_abs(x):
    """|X_k| for k = 0..n/2 by the defining sum."""
    n = len(x)
    t = np.arange(n)
    return np.array([abs(np.sum(x * np.exp(-2j * np.pi * k * t / n))) for k in range(n // 2 + 1)])


def finite_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def tiny_suite(n=12, seed=0, **kw):
    """A small pretraining run at SR=64 matching ``tiny_config``."""
    from deepmachining import synth

    base = dict(sr=64, c1=4, c2=2, resonance_hz=10.0, resonance_drift_hz=5.0, resonance_width_hz=2.0, n_cuts=2)
    base.update(kw)
    return synth.generate_dataset(synth.pretrain_suite(seed, n_workpieces=n, **base))


# acceptance reporting: one pass/fail line per criterion in the terminal summary ------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as rec: ...; rec(detail)`` marks n as PASS unless the block raises."""
    import contextlib

    @contextlib.contextmanager
    def run(n, title):
        notes = []
        try:
            yield notes.append
        except BaseException as exc:
            ACCEPTANCE[n] = (False, f"{title}: {'; '.join(notes)} [{type(exc).__name__}: {exc}]".replace("\n", " "))
            raise
        ACCEPTANCE[n] = (True, f"{title}: {'; '.join(notes)}")

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text[:400]}")
