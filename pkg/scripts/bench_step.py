"""Forward+backward wall time per workpiece for the default model at several micro-batch sizes."""

import time

import numpy as np

from deepmachining.model import DeepMachining, ModelConfig, pretrain_mask
from deepmachining.tensor import Graph
from deepmachining.train import mse_loss


def main(repeats: int = 3):
    cfg = ModelConfig()
    model = DeepMachining(cfg)
    for n in pretrain_mask(model.params):
        model.params[n].requires_grad = True
    rng = np.random.default_rng(0)
    for B in (1, 4, 8, 16):
        xt = rng.standard_normal((B, 3, cfg.sr, cfg.c1)).astype(np.float32)
        xf = rng.standard_normal((B, 3, cfg.spec_len, cfg.c2)).astype(np.float32)
        best = float("inf")
        for r in range(repeats):
            t0 = time.perf_counter()
            g = Graph("train", rng=np.random.default_rng(r))
            with g:
                loss = mse_loss(model.forward(xt, xf), np.zeros(B))
            g.backward(loss)
            best = min(best, time.perf_counter() - t0)
            for t in model.params.values():
                t.grad = None
        print(f"B={B:2d}: {1000 * best / B:6.1f} ms per workpiece")


if __name__ == "__main__":
    main()
