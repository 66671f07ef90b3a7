"""Command-line entry point: ``tscnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint
from .complexity import appendix_b_table, complexity_report
from .controllers import ControllerConfig, export_step_sizes, step_sizes_csv
from .data import make_dataset
from .ode import AdaptiveConfig, Ivp, integrate_adaptive, integrate_fixed
from .resnet import NetworkSpec, StageSpec, bake, build_network, preset, toy_spec
from .training import TrainConfig, evaluate, train


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def _load_config(args) -> TrainConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("epochs", "batch_size", "lr", "weight_decay", "momentum", "preset", "block_kind", "blocks_per_stage"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "widths", None):
        d["widths"] = _ints(args.widths)
    if getattr(args, "controller", None):
        d["controller"] = {"kind": args.controller}
        if args.controller == "fixed":
            d["controller"]["fixed_value"] = args.fixed_value
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _dataset_for(ckpt_path: str, split: str):
    meta = checkpoint.metadata(ckpt_path)
    if "config" not in meta:
        raise SystemExit("checkpoint carries no training config; cannot regenerate its dataset")
    cfg = TrainConfig.from_dict(meta["config"])
    ds = dict(cfg.dataset)
    kind = ds.pop("kind")
    train_set, test_set = make_dataset(kind, ds, seed=ds.pop("seed", cfg.seed))
    return train_set if split == "train" else test_set


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record, net = train(cfg)
    (out / "run.json").write_text(json.dumps(record.to_dict(), indent=1))
    (out / "run.csv").write_text(record.epochs_csv())
    (out / "steps.csv").write_text(step_sizes_csv(export_step_sizes(net)))
    checkpoint.save(net, out / "checkpoint.json", {"config": cfg.to_dict()})
    checkpoint.save(bake(net), out / "baked.json", {"config": cfg.to_dict()})
    final = record.final
    print(json.dumps({k: final[k] for k in ("train_acc", "test_acc", "test_loss", "evolution_time")}))
    return 0


def cmd_eval(args) -> int:
    net = checkpoint.load(args.checkpoint)
    data = _dataset_for(args.checkpoint, args.split)
    loss, acc = evaluate(net, data)
    print(json.dumps({"split": args.split, "loss": loss, "accuracy": acc}))
    return 0


def cmd_ode_demo(args) -> int:
    lam = args.lam
    ivp = Ivp(lambda t, y: lam * y, [args.y0], (0.0, args.T))
    if args.method == "rkf":
        trace = integrate_adaptive(ivp, AdaptiveConfig(tol=args.tol, h_init=args.h))
    else:
        trace = integrate_fixed(ivp, args.h, args.method)
    sys.stdout.write(trace.to_csv())
    return 0


def cmd_noise_sweep(args) -> int:
    from .experiments import noise_sweep

    net = checkpoint.load(args.checkpoint)
    data = _dataset_for(args.checkpoint, "test")
    rows = noise_sweep(net, data, _floats(args.levels), args.trials, args.seed)
    print("sigma,accuracy,loss,accuracy_sd")
    for r in rows:
        print(f"{r.sigma!r},{r.accuracy!r},{r.loss!r},{r.accuracy_sd!r}")
    return 0


def cmd_depth_sweep(args) -> int:
    from .experiments import depth_sweep

    cfg = _load_config(args)
    cells = depth_sweep(cfg, _ints(args.depths), _ints(args.seeds))
    print("blocks_per_stage,depth,variant,mean,sd,runs")
    for c in cells:
        print(f"{c.blocks_per_stage},{c.depth},{c.variant},{c.mean!r},{c.sd!r},{c.runs}")
    return 0


def cmd_complexity(args) -> int:
    spec = preset(args.preset)
    if args.appendix_b:
        for si, row in enumerate(appendix_b_table(spec, args.r)):
            print(f"stage{si + 1}  " + "  ".join(f"{cell:>18}" for cell in row))
        return 0
    rep = complexity_report(spec, args.kind, args.r)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=1))
        return 0
    print(f"{'preset':<18}{args.preset}")
    print(f"{'controller':<18}{rep.kind}")
    print(f"{'params base':<18}{rep.params_base:>14,d}  ({rep.params_base / 1e6:.2f}M)")
    print(f"{'params train':<18}{rep.params_train:>14,d}  ({rep.params_train / 1e6:.2f}M)")
    print(f"{'params infer':<18}{rep.params_infer:>14,d}  ({rep.params_infer / 1e6:.2f}M)")
    print(f"{'GFLOPs infer':<18}{rep.flops_infer / 1e9:>14.3f}")
    print(f"{'stage':<8}{'blocks':>8}{'C':>8}{'train':>12}{'infer':>10}")
    for s in rep.per_stage:
        print(f"{s['stage']:<8}{s['blocks']:>8}{s['channels']:>8}{s['overhead_train']:>12,d}{s['overhead_infer']:>10,d}")
    return 0


def cmd_stability_check(args) -> int:
    from .stability import measure_amplification

    if args.checkpoint:
        net = checkpoint.load(args.checkpoint)
        rng = np.random.default_rng(args.seed)
        c = net.stages[0][0].in_channels
        y0 = rng.normal(size=(c, args.spatial, args.spatial))
    else:
        spec = NetworkSpec((StageSpec(args.depth, args.width, "plain"),), input_channels=args.width, num_classes=2)
        net = build_network(spec, ControllerConfig(kind=args.controller), seed=args.seed)
        y0 = np.random.default_rng(args.seed).normal(size=(args.width, args.spatial, args.spatial))
    rep = measure_amplification(net, y0, args.epsilon, args.trials, args.seed)
    print(json.dumps(rep.to_dict(), indent=1))
    return 0


def cmd_export_steps(args) -> int:
    net = checkpoint.load(args.checkpoint)
    rows = export_step_sizes(net)
    if args.csv:
        sys.stdout.write(step_sizes_csv(rows))
    else:
        print(json.dumps([r.to_dict() for r in rows], indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_gradients, toy_problem

    net, loss_fn = toy_problem(args.controller, args.blocks, args.seed)
    results = check_gradients(loss_fn, net.named_parameters())
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_error)
        print(f"{r.name:<40}{r.size:>7}  rel={r.max_rel_error:.2e}  {'ok' if r.ok(args.rtol) else 'FAIL'}")
    print(f"worst relative error {worst:.2e} (tolerance {args.rtol:g})")
    return 0 if worst <= args.rtol else 1


def _train_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--preset")
    p.add_argument("--block-kind", dest="block_kind")
    p.add_argument("--blocks-per-stage", dest="blocks_per_stage", type=int)
    p.add_argument("--widths", help="comma-separated stage widths")
    p.add_argument("--controller", choices=["lstm", "2fc", "indp", "fixed"])
    p.add_argument("--fixed-value", dest="fixed_value", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tscnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and its step controller")
    _train_flags(p, seed_required=True)
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ode-demo", help="integrate y' = lam*y and print the trace as CSV")
    p.add_argument("--method", choices=["euler", "rk4", "rkf"], default="rkf")
    p.add_argument("--lam", type=float, default=-4.0)
    p.add_argument("--y0", type=float, default=1.0)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_ode_demo)

    p = sub.add_parser("noise-sweep", help="accuracy and loss under Gaussian input noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--levels", default="0,0.1,0.2,0.3,0.5,0.7,1.0")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("depth-sweep", help="baseline vs controller accuracy over depths")
    _train_flags(p, seed_required=False)
    p.add_argument("--depths", default="1,2,4")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_depth_sweep)

    p = sub.add_parser("complexity", help="parameter and FLOP accounting for a preset")
    p.add_argument("--preset", default="resnet50")
    p.add_argument("--kind", choices=["lstm", "2fc", "indp", "fixed"], default="lstm")
    p.add_argument("--r", type=int)
    p.add_argument("--json", action="store_true")
    p.add_argument("--appendix-b", dest="appendix_b", action="store_true")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("stability-check", help="measured perturbation growth vs the product bound")
    p.add_argument("--checkpoint")
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--spatial", type=int, default=2)
    p.add_argument("--controller", choices=["lstm", "2fc", "indp", "fixed"], default="lstm")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stability_check)

    p = sub.add_parser("export-steps", help="print the step-size table of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_export_steps)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--controller", choices=["lstm", "2fc", "indp"], default="lstm")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
