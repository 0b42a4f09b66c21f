"""End-to-end desk-scale run: synthetic suites -> pretrain (random and sequential) -> two-shot fine-tune -> eval.

    python3 scripts/desk_pipeline.py --out runs/desk --epochs 128
"""

import argparse
import logging
import time
from pathlib import Path

from deepmachining import synth
from deepmachining.checkpoint import save_checkpoint
from deepmachining.evaluate import evaluate
from deepmachining.model import ModelConfig
from deepmachining.signal_io import select
from deepmachining.train import TrainPlan, finetune_two_shot, pretrain, split_random, split_sequential


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workpieces", type=int, default=300)
    ap.add_argument("--epochs", type=int, default=128)
    ap.add_argument("--finetune-epochs", type=int, default=64)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = synth.pretrain_suite(args.seed, n_workpieces=args.workpieces)
    data = synth.generate_dataset(cfg)
    adapt = {}
    for suite in ("adapt-tool", "adapt-material"):
        d = synth.generate_dataset(synth.SUITES[suite](args.seed))
        split = synth.shot_split(d)
        adapt[suite] = (select(d, split, "shot"), select(d, split, "test"))

    splits = {"random": split_random(data, 0.8, args.seed), "sequential": split_sequential(data, 0.8)}
    for name, entries in splits.items():
        t0 = time.perf_counter()
        plan = TrainPlan.pretrain(epochs=args.epochs, seed=args.seed)
        ckpt = pretrain(select(data, entries, ("train", "shot")), ModelConfig(seed=args.seed), plan, out / f"pretrain_{name}.csv")
        save_checkpoint(out / f"pretrain_{name}.dmck", ckpt)
        test = select(data, entries, "test")
        rep = evaluate(ckpt, test)
        rep.write(out / f"pretrain_{name}.txt", out / f"pretrain_{name}_scatter.csv")
        print(f"[pretrain/{name}] {' '.join(rep.lines())} floor={synth.noise_floor(cfg, test):.6f} "
              f"({time.perf_counter() - t0:.0f}s)")
        for suite, (shots, test) in adapt.items():
            zero = evaluate(ckpt, test)
            tuned = finetune_two_shot(ckpt, shots, TrainPlan.finetune(epochs=args.finetune_epochs, seed=args.seed))
            rep = evaluate(tuned, test)
            tag = f"{name}_{suite}"
            save_checkpoint(out / f"finetune_{tag}.dmck", tuned)
            rep.write(out / f"finetune_{tag}.txt", out / f"finetune_{tag}_scatter.csv")
            print(f"  [{suite}] zero-shot mae={zero.mae:.6f} corr={zero.corr:.4f} -> "
                  f"fine-tuned mae={rep.mae:.6f} corr={rep.corr:.4f} (x{rep.mae / zero.mae:.3f})")


if __name__ == "__main__":
    main()
