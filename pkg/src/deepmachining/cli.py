"""Command-line entry point: gen, pretrain, finetune, predict, eval, inspect, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import synth
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import evaluate, predict
from .model import DeepMachining, ModelConfig, finetune_mask, insert_adapters, param_counts, pretrain_mask
from .signal_io import load_dataset, read_split, select
from .train import TrainPlan, finetune_two_shot, pretrain, split_random, split_sequential

log = logging.getLogger("deepmachining")

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
PLAN_KEYS = {"lr", "batch_size", "epochs", "micro_batch", "weight_decay"}


class StageError(RuntimeError):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("DM_SEED", "0"))


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise StageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        if isinstance(value, str):
            value = value.replace("[", "").replace("]", "").replace(",", " ").split()
        return tuple(int(v) for v in value)
    return value


def effective(args, defaults: dict, keys) -> dict:
    """defaults < config file < command-line flags."""
    out = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k in keys:
                out[k] = _coerce(v, defaults.get(k, v))
            elif k not in MODEL_KEYS | PLAN_KEYS:
                raise StageError(f"unknown config key {k!r}")
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = _coerce(v, defaults.get(k, v))
    return out


def model_config(args) -> ModelConfig:
    base = ModelConfig().to_dict()
    base["kernel_schedule"] = tuple(base["kernel_schedule"])
    cfg = effective(args, base, MODEL_KEYS)
    return ModelConfig(**cfg)


def plan_from(args, regime: str) -> TrainPlan:
    base = TrainPlan.pretrain() if regime == "pretrain" else TrainPlan.finetune()
    defaults = {k: getattr(base, k) for k in PLAN_KEYS}
    kw = effective(args, defaults, PLAN_KEYS)
    return TrainPlan(regime=regime, seed=_seed(args), **kw)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise StageError(f"{what} not found: {p}")
    return p


def _writable(path) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise StageError(f"cannot write to {p}")
    return p


def _split(args, samples):
    if getattr(args, "manifest", None):
        return read_split(_existing(args.manifest, "split manifest"))
    if args.split == "random":
        return split_random(samples, args.ratio, _seed(args))
    if args.split == "sequential":
        return split_sequential(samples, args.ratio)
    return None


# commands ------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise StageError(f"output directory {out} is not writable")
    suites = list(synth.SUITES) if args.suite == "all" else [args.suite]
    for suite in suites:
        overrides = {}
        if args.label_quantum is not None:
            overrides["label_quantum_mm"] = args.label_quantum
        n = args.n_workpieces if suite == "pretrain" else None
        paths = synth.write_suite(out, suite, _seed(args), n_workpieces=n, **overrides)
        for p in paths.values():
            print(p)
    return 0


def cmd_pretrain(args) -> int:
    data_path = _existing(args.data, "dataset")
    out = _writable(args.out)
    cfg = model_config(args)
    plan = plan_from(args, "pretrain")
    samples = load_dataset(data_path)
    entries = _split(args, samples)
    train = samples if entries is None else select(samples, entries, ("train", "shot"))
    header = {**{f"model.{k}": v for k, v in cfg.to_dict().items()}, **{f"plan.{k}": v for k, v in vars(plan).items()}}
    header.update({"data": str(data_path), "split": args.split, "ratio": args.ratio, "n_train": len(train)})
    ckpt = pretrain(train, cfg, plan, args.metrics, header)
    save_checkpoint(out, ckpt)
    print(out)
    return 0


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    samples = load_dataset(_existing(args.data, "dataset"))
    out = _writable(args.out)
    plan = plan_from(args, "finetune")
    if args.manifest:
        entries = read_split(_existing(args.manifest, "split manifest"))
        shots = _first_per_epoch(select(samples, entries, "shot"), args.shots)
    else:
        shots = _first_per_epoch(samples, args.shots)
    header = {**{f"plan.{k}": v for k, v in vars(plan).items()}, "shots": len(shots), "ckpt": args.ckpt}
    tuned = finetune_two_shot(ckpt, shots, plan, args.metrics, header)
    save_checkpoint(out, tuned)
    print(out)
    return 0


def _first_per_epoch(samples, k: int):
    seen: dict[int, int] = {}
    out = []
    for wp in samples:
        c = seen.get(wp.config_epoch, 0)
        if c < k:
            out.append(wp)
        seen[wp.config_epoch] = c + 1
    return out


def _eval_set(args, samples):
    entries = _split(args, samples)
    if entries is None:
        return samples
    return select(samples, entries, args.role)


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    samples = _eval_set(args, load_dataset(_existing(args.data, "dataset")))
    out = _writable(args.out)
    y_hat = predict(ckpt, samples)
    rows = ["id,y_hat_mm"] + [f"{wp.id},{v:.9g}" for wp, v in zip(samples, y_hat)]
    out.write_text("\n".join(rows) + "\n")
    print(out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    samples = _eval_set(args, load_dataset(_existing(args.data, "dataset")))
    report = evaluate(ckpt, samples)
    if args.report:
        scatter = args.scatter or str(Path(args.report).with_suffix(".csv"))
        report.write(_writable(args.report), _writable(scatter))
    for line in report.lines():
        print(line)
    return 0


def cmd_inspect(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(_existing(args.ckpt, "checkpoint"))
        model = ckpt.model()
    else:
        model = DeepMachining(model_config(args))
    params = model.params
    if args.mode == "finetune":
        if not model.adapters:
            params = insert_adapters(params, model.cfg)
        mask = finetune_mask(params)
    else:
        mask = pretrain_mask(params)
    if args.verbose:
        for name, t in params.items():
            flag = "train" if name in mask else "frozen"
            print(f"{name}\t{'x'.join(map(str, t.shape))}\t{t.data.size}\t{flag}")
    total, trainable, fraction = param_counts(params, mask)
    print(f"mode={args.mode}")
    print(f"total={total}")
    print(f"trainable={trainable}")
    print(f"fraction={fraction:.6f}")
    plans = TrainPlan.finetune().epochs / TrainPlan.pretrain().epochs
    print(f"epoch_ratio={plans:.6f}")
    return 0


def gradcheck_suite(rel_tol: float = 1e-4, seed: int = 0, max_elements: int = 6):
    """Finite-difference check of every block of a tiny 64-bit model. Returns {block: worst error}."""
    from . import model as M
    from . import tensor as T
    from .train import mse_loss

    cfg = ModelConfig(d=8, stacks=2, kernel_schedule=(5, 3, 3), sr=64, c1=4, c2=2, dropout_p=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        base = DeepMachining(cfg).astype(np.float64)
        params = insert_adapters(base.params, cfg)
        for n, t in params.items():
            # break the zero init so every branch carries gradient
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
        xt = T.Tensor(rng.standard_normal((1, 2, cfg.sr, cfg.c1)))
        xf = T.Tensor(rng.standard_normal((1, 2, cfg.spec_len, cfg.c2)))
        F = T.Tensor(rng.standard_normal((1, 13, cfg.d)))
        probe = T.Tensor(rng.standard_normal((1, 13, cfg.d)))
        h8 = T.Tensor(rng.standard_normal((3, 8 * cfg.d)))
        y = rng.standard_normal(2)

        def pick(prefix):
            return [t for n, t in params.items() if n.startswith(prefix)]

        def weighted(out):
            w = T.Tensor(np.linspace(-1, 1, out.data.size).reshape(out.shape))
            return T.sum_all(T.mul(out, w))

        cases = {
            "stem": (lambda: weighted(M.stem_forward(xt, params, "time.stem")), pick("time.stem") + [xt]),
            "d_inception": (
                lambda: T.sum_all(T.mul(M.d_inception_forward(F, params, "time.inc0", 5), probe)),
                pick("time.inc0.") + [F],
            ),
            "downsampling": (
                lambda: weighted(M.downsampling_forward(F, params, "time.down0")),
                pick("time.down0.") + [F],
            ),
            "adapter": (
                lambda: T.sum_all(T.mul(M.adapter_forward(F, params, "time.inc1"), probe)),
                pick("time.inc1.adapter") + [F],
            ),
            "head": (
                lambda: weighted(M.projection_head(h8, params)),
                pick("head.") + [h8],
            ),
            "model+loss": (
                lambda: mse_loss(M.model_forward(T.reshape(xt, (2, 1, cfg.sr, cfg.c1)), T.reshape(xf, (2, 1, cfg.spec_len, cfg.c2)), params, cfg), y),
                [params[n] for n in list(params)[::7]],
            ),
        }
        results = {}
        for name, (fn, inputs) in cases.items():
            rep = T.grad_check(fn, inputs, rel_tol=rel_tol, max_elements=max_elements, seed=seed)
            results[name] = rep.worst
    return results


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.rel_tol, _seed(args))
    bad = False
    for name, err in results.items():
        status = "ok" if err < args.rel_tol else "FAIL"
        bad |= err >= args.rel_tol
        print(f"{name}\tmax_rel_error={err:.3e}\t{status}")
    print(f"max_rel_error={max(results.values()):.3e}")
    return 1 if bad else 0


# parser -----------------------------------------------------------------------------------


def _model_flags(p) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--d", type=int)
    g.add_argument("--r-attn", dest="r_attn", type=int)
    g.add_argument("--r-adapter", dest="r_adapter", type=int)
    g.add_argument("--stacks", type=int)
    g.add_argument("--kernel-schedule", dest="kernel_schedule", type=int, nargs="+")
    g.add_argument("--stage2-s", dest="stage2_s", type=int)
    g.add_argument("--dropout-p", dest="dropout_p", type=float)
    g.add_argument("--sr", type=int)
    g.add_argument("--c1", type=int)
    g.add_argument("--c2", type=int)


def _plan_flags(p) -> None:
    g = p.add_argument_group("training plan overrides")
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--micro-batch", dest="micro_batch", type=int)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--metrics", help="append per-epoch epoch,loss,wall_ms lines here")


def _split_flags(p, default_role="test") -> None:
    p.add_argument("--manifest", help="split manifest (id,role,epoch)")
    p.add_argument("--split", choices=("random", "sequential", "none"), default="none")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--role", default=default_role, choices=("train", "shot", "test"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmachining", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic DMDS suites and split manifests")
    p.add_argument("--suite", required=True, choices=(*synth.SUITES, "all"))
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-workpieces", dest="n_workpieces", type=int, help="truncate the pretraining suite")
    p.add_argument("--label-quantum", dest="label_quantum", type=float, help="measurement resolution in mm")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train every parameter on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("random", "sequential", "none"), default="random")
    p.add_argument("--ratio", type=float, default=0.8)
    _model_flags(p)
    _plan_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="two-shot adaptation: adapters, biases and head only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    _plan_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="write id,y_hat_mm for a dataset (or one split role)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _split_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="MAE / RMSE / CORR report plus scatter CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.add_argument("--scatter")
    p.add_argument("--seed", type=int)
    _split_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="parameter counts per tensor and trainable fraction")
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=("pretrain", "finetune"), default="pretrain")
    p.add_argument("--config")
    p.add_argument("--per-tensor", dest="verbose", action="store_true")
    _model_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block on a tiny config")
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        print(f"deepmachining {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
