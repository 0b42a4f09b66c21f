"""Error metrics (MAE, RMSE, Pearson CORR) and the evaluation driver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .signal_io import DataError, WorkpieceSample
from .train import _stack, check_compatible, micro_batches, prepare


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size != y_hat.size:
        raise DataError(f"length mismatch: {y.size} targets vs {y_hat.size} predictions")
    if y.size == 0:
        raise DataError("metrics need at least one pair")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def pearson_corr(y, y_hat) -> float | None:
    """Population Pearson correlation; ``None`` when either series is constant."""
    y, y_hat = _pair(y, y_hat)
    if y.size < 2:
        raise DataError("correlation needs at least two pairs")
    dy = y - y.mean()
    dp = y_hat - y_hat.mean()
    vy = np.mean(dy * dy)
    vp = np.mean(dp * dp)
    denom = math.sqrt(vy) * math.sqrt(vp)
    if denom == 0:
        return None
    r = np.mean(dy * dp) / denom
    return float(min(1.0, max(-1.0, r)))


@dataclass
class EvalReport:
    mae: float
    rmse: float
    corr: float | None
    n: int
    ids: list[str] = field(default_factory=list)
    pairs: list[tuple[float, float]] = field(default_factory=list)

    @property
    def corr_undefined(self) -> bool:
        return self.corr is None

    @classmethod
    def from_pairs(cls, y, y_hat, ids=None) -> "EvalReport":
        y, y_hat = _pair(y, y_hat)
        corr = pearson_corr(y, y_hat) if y.size >= 2 else None
        ids = list(ids) if ids is not None else [str(i) for i in range(y.size)]
        return cls(mae(y, y_hat), rmse(y, y_hat), corr, int(y.size), ids, list(zip(y.tolist(), y_hat.tolist())))

    def lines(self) -> list[str]:
        corr = "undefined" if self.corr is None else f"{self.corr:.6f}"
        return [f"mae={self.mae:.9g}", f"rmse={self.rmse:.9g}", f"corr={corr}", f"n={self.n}"]

    def write(self, path, scatter_path=None) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")
        if scatter_path is not None:
            write_scatter(scatter_path, self.ids, [p[0] for p in self.pairs], [p[1] for p in self.pairs])


def write_scatter(path, ids, y, y_hat) -> None:
    rows = ["id,y_mm,y_hat_mm"] + [f"{i},{a:.9g},{b:.9g}" for i, a, b in zip(ids, y, y_hat)]
    Path(path).write_text("\n".join(rows) + "\n")


def predict(ckpt: Checkpoint, samples: Sequence[WorkpieceSample], micro_batch: int = 8) -> np.ndarray:
    """Infer-mode predictions in mm, in the order of ``samples``."""
    if ckpt.stats is None:
        raise DataError("checkpoint carries no normalisation statistics")
    if not samples:
        return np.zeros(0)
    check_compatible(ckpt.config, samples)
    model = ckpt.model()
    data = prepare(samples, ckpt.stats)
    out = np.zeros(len(samples), dtype=np.float64)
    with T.Graph("infer"):
        for mb in micro_batches(range(len(samples)), data.n_cuts, micro_batch):
            xt, xf = _stack(data, mb)
            out[mb] = model.forward(xt, xf).data
    return out * ckpt.stats.label_std + ckpt.stats.label_mean


def evaluate(ckpt: Checkpoint, samples: Sequence[WorkpieceSample]) -> EvalReport:
    y_hat = predict(ckpt, samples)
    y = [np.float64(np.float32(wp.label_mm)) for wp in samples]
    return EvalReport.from_pairs(y, y_hat, [wp.id for wp in samples])
