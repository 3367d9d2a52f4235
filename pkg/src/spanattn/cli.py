"""Command-line entry point: train, eval, analyze, spans, gradcheck, and
export-plots subcommands."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import errors
from .analysis import ScalingPoint, cost_report, export_scaling_tables
from .checkpoint import load_checkpoint
from .data import load_cifar100, make_splits, materialize_test_split
from .models import ModelConfig, build_model, report_learned_spans
from .training import TrainConfig, evaluate, train

__all__ = ["run", "main"]

DATA_ENV_VAR = "ADAPTIVE_ATTN_DATA"

# user-input problems exit 1; anything else that blows up mid-run exits 2
VALIDATION_ERRORS = (
    errors.ConflictingFlags,
    errors.ConfigMismatch,
    errors.FractionOutOfRange,
    errors.InvalidChannelPlan,
    errors.MissingFile,
    errors.MissingRun,
    errors.NotAdaptiveModel,
)

ATTENTION_ONLY_FLAGS = ("heads", "ramp", "init_span", "span_l1")
ADAPTIVE_ONLY_FLAGS = ("ramp", "init_span", "span_l1")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spanattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--primitive", choices=("conv", "fixed", "adaptive"), default="conv")
        p.add_argument("--size", choices=("small", "medium", "large"), default="small")
        p.add_argument("--heads", type=int, default=None)
        p.add_argument("--ramp", type=int, default=None)
        p.add_argument("--init-span", type=float, default=None)

    t = sub.add_parser("train", help="train a model and write metrics + checkpoints")
    add_model_flags(t)
    t.add_argument("--data", default=None, help=f"dataset dir (or ${DATA_ENV_VAR})")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch", type=int, default=50)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--wd", type=float, default=None)
    t.add_argument("--span-l1", type=float, default=None)
    t.add_argument("--fraction", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--precision", choices=("f32", "f64"), default="f32")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--out", default=None)
    t.add_argument("--config", default=None, help="resolved-config snapshot to replay")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--batch", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--fraction", type=float, default=1.0)
    e.add_argument("--primitive", choices=("conv", "fixed", "adaptive"), default=None)
    e.add_argument("--size", choices=("small", "medium", "large"), default=None)

    a = sub.add_parser("analyze", help="parameter and FLOP accounting")
    add_model_flags(a)
    a.add_argument("--out", default=None)

    s = sub.add_parser("spans", help="report learned spans from a checkpoint")
    s.add_argument("--checkpoint", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference verification suites")
    g.add_argument("--target", choices=("ops", "mask", "attention", "all"), default="all")

    x = sub.add_parser("export-plots", help="collect runs into plot-ready CSVs")
    x.add_argument("--runs", nargs="+", required=True, help="run directories from train")
    x.add_argument("--out", required=True)
    return parser


def _check_flag_conflicts(args) -> None:
    if args.primitive == "conv":
        for flag in ATTENTION_ONLY_FLAGS:
            if getattr(args, flag, None) is not None:
                raise errors.ConflictingFlags(
                    f"--{flag.replace('_', '-')} does not apply to --primitive conv")
    elif args.primitive == "fixed":
        for flag in ADAPTIVE_ONLY_FLAGS:
            if getattr(args, flag, None) is not None:
                raise errors.ConflictingFlags(
                    f"--{flag.replace('_', '-')} does not apply to --primitive fixed")


def _model_config_from_args(args) -> ModelConfig:
    _check_flag_conflicts(args)
    kwargs = {"primitive": args.primitive, "size_class": args.size}
    if getattr(args, "heads", None) is not None:
        kwargs["heads"] = args.heads
    if getattr(args, "ramp", None) is not None:
        kwargs["ramp"] = args.ramp
    if getattr(args, "init_span", None) is not None:
        kwargs["init_span"] = args.init_span
    return ModelConfig(**kwargs)


def _data_dir(args) -> str:
    path = getattr(args, "data", None) or os.environ.get(DATA_ENV_VAR)
    if not path:
        raise errors.MissingFile(
            f"no dataset directory: pass --data or set ${DATA_ENV_VAR}")
    return path


def _dtype(precision: str):
    return np.float64 if precision == "f64" else np.float32


def _cmd_train(args) -> int:
    if args.config:
        with open(args.config) as fh:
            snapshot = json.load(fh)
        model_config = ModelConfig.from_dict(snapshot["model_config"])
        train_config = TrainConfig(**snapshot["train_config"])
        fraction = snapshot["fraction"]
        data_dir = args.data or snapshot["data_dir"] or _data_dir(args)
    else:
        model_config = _model_config_from_args(args)
        train_config = TrainConfig(
            epochs=args.epochs, batch_size=args.batch, lr0=args.lr,
            weight_decay=args.wd, seed=args.seed, precision=args.precision,
            span_l1_coeff=args.span_l1 if args.span_l1 is not None else 0.0,
            augment=not args.no_augment)
        fraction = args.fraction
        data_dir = _data_dir(args)
    train_config = train_config.resolved(model_config.primitive)

    out_dir = args.out or os.path.join(
        "runs", f"{model_config.primitive}-{model_config.size_class}"
                f"-f{fraction:g}-s{train_config.seed}")
    os.makedirs(out_dir, exist_ok=True)

    train_raw, test_raw = load_cifar100(data_dir)
    train_split, val_split = make_splits(train_raw, val_count=5000,
                                         fraction=fraction, seed=train_config.seed)

    snapshot = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "fraction": fraction,
        "data_dir": str(data_dir),
        "channel_mean": train_split.channel_mean.tolist(),
        "channel_std": train_split.channel_std.tolist(),
    }
    with open(os.path.join(out_dir, "resolved-config.json"), "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)

    model = build_model(model_config, seed=train_config.seed,
                        dtype=_dtype(train_config.precision))
    print(f"training {model_config.primitive}/{model_config.size_class} "
          f"on {len(train_split)} images (fraction {fraction:g}), "
          f"{train_config.epochs} epochs -> {out_dir}")
    metrics = train(model, train_split, val_split, train_config, out_dir=out_dir)
    for row in metrics.rows:
        print(f"  epoch {row.epoch:3d}  train {row.train_loss:.4f}/{row.train_acc:.3f}  "
              f"val {row.val_loss:.4f}/{row.val_acc:.3f}  lr {row.lr:.5f}  "
              f"{row.seconds:.1f}s")

    test_split = materialize_test_split(test_raw, val_split)
    _, test_acc = evaluate(model, test_split, batch_size=max(train_config.batch_size, 100))
    report = cost_report(model)
    summary = {
        "test_acc": test_acc,
        "best_val_acc": metrics.best_val_acc,
        "params": report.total_params,
        "flops": report.total_flops,
        "extents": report.extents,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"test accuracy {test_acc:.4f}  (params {report.total_params:,}, "
          f"flops {report.total_flops / 1e6:.1f}M)")
    return 0


def _cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint, expect_primitive=args.primitive,
                                      expect_size=args.size)
    data_dir = _data_dir(args)
    train_raw, test_raw = load_cifar100(data_dir)
    if args.split == "test":
        ref, _ = make_splits(train_raw, val_count=5000, fraction=0.01, seed=args.seed)
        split = materialize_test_split(test_raw, ref)
    else:
        train_split, val_split = make_splits(train_raw, val_count=5000,
                                             fraction=args.fraction, seed=args.seed)
        split = train_split if args.split == "train" else val_split
    loss, acc = evaluate(model, split, batch_size=args.batch)
    print(f"{args.split} loss {loss:.4f}  accuracy {acc:.4f}  "
          f"({manifest['model_config']['primitive']}/{manifest['model_config']['size_class']})")
    return 0


def _cmd_analyze(args) -> int:
    config = _model_config_from_args(args)
    model = build_model(config, seed=0)
    report = cost_report(model)
    print(f"{config.primitive}/{config.size_class}: params {report.total_params:,}  "
          f"flops {report.total_flops / 1e6:.1f}M"
          + (f"  extents {report.extents}" if report.extents else ""))
    for layer in report.layers:
        print(f"  {layer.path:<12s} params {layer.params:>9,}  "
              f"flops {(layer.flops) / 1e6:>8.2f}M")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "cost.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(args.out, "resolved-config.json"), "w") as fh:
            json.dump({"model_config": config.to_dict()}, fh, indent=2, sort_keys=True)
    return 0


def _cmd_spans(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    reports = report_learned_spans(model)
    for rep in reports:
        zs = " ".join(f"{z:.3f}" for z in rep.spans)
        print(f"block {rep.block}: z = [{zs}]  max_size {rep.max_size}  extent {rep.extent}")
    print(" ".join(str(r.extent) for r in reports))
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check
    from .tensor import Tensor, mul, tensor_sum

    rng = np.random.default_rng(0)
    failures = []

    def show(name, report):
        status = "PASS" if report.passed else "FAIL"
        print(f"{status}  {name:<24s} max rel err {report.max_rel_err:.3e} "
              f"(tol {report.tol:.0e})")
        if not report.passed:
            failures.append(name)

    if args.target in ("ops", "all"):
        from .tensor import batch_norm, conv2d, softmax_masked
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
        probe = Tensor(rng.standard_normal((2, 4, 6, 6)))
        show("conv2d", grad_check(
            lambda: tensor_sum(mul(conv2d(x, w, padding=1), probe)),
            [("x", x), ("w", w)], tol=1e-5))
        logits = Tensor(rng.standard_normal((3, 7)), requires_grad=True)
        mask = Tensor(rng.uniform(0.2, 1.0, 7), requires_grad=True)
        probe2 = Tensor(rng.standard_normal((3, 7)))
        show("softmax_masked", grad_check(
            lambda: tensor_sum(mul(softmax_masked(logits, mask), probe2)),
            [("logits", logits), ("mask", mask)], tol=1e-5))
        xb = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
        gam = Tensor(np.array([1.1, 0.9]), requires_grad=True)
        bet = Tensor(np.array([0.0, 0.2]), requires_grad=True)
        probe3 = Tensor(rng.standard_normal((4, 2, 3, 3)))
        show("batch_norm", grad_check(
            lambda: tensor_sum(mul(batch_norm(xb, gam, bet, np.zeros(2), np.ones(2),
                                              training=True), probe3)),
            [("x", xb), ("gamma", gam), ("beta", bet)], tol=1e-5))

    if args.target in ("mask", "all"):
        from .mask import SpanParam, create_adaptive_mask
        span = SpanParam(z=1.3, ramp=2)
        probe = Tensor(rng.standard_normal((9, 9)))
        show("adaptive_mask", grad_check(
            lambda: tensor_sum(mul(create_adaptive_mask(9, span).values, probe)),
            [("z", span.z)], tol=1e-6))

    if args.target in ("attention", "all"):
        from .attention import AttentionLayer, AttentionLayerConfig
        layer = AttentionLayer(
            AttentionLayerConfig(in_channels=2, out_channels=4, heads=2,
                                 variant="adaptive", input_size=5, init_span=1.3),
            rng=np.random.default_rng(1), dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        probe = Tensor(rng.standard_normal((1, 4, 5, 5)))
        params = [("x", x)]
        for i in range(2):
            params += [(f"q.{i}", layer.q[i]), (f"k.{i}", layer.k[i]),
                       (f"v.{i}", layer.v[i]), (f"spans.{i}.z", layer.spans[i].z)]
        params += [("h_table", layer.h_table), ("w_table", layer.w_table)]
        show("attention_layer", grad_check(
            lambda: tensor_sum(mul(layer(x), probe)), params, h=1e-5, tol=1e-4))

    if failures:
        print(f"FAIL: {len(failures)} target(s): {', '.join(failures)}")
        return 2
    print("PASS: all gradient checks")
    return 0


def _cmd_export_plots(args) -> int:
    points = []
    for run_dir in args.runs:
        cfg_path = os.path.join(run_dir, "resolved-config.json")
        sum_path = os.path.join(run_dir, "summary.json")
        if not (os.path.exists(cfg_path) and os.path.exists(sum_path)):
            print(f"skipping {run_dir}: missing resolved-config.json or summary.json",
                  file=sys.stderr)
            continue
        with open(cfg_path) as fh:
            snap = json.load(fh)
        with open(sum_path) as fh:
            summary = json.load(fh)
        points.append(ScalingPoint(
            primitive=snap["model_config"]["primitive"],
            size_class=snap["model_config"]["size_class"],
            params=summary["params"], flops=summary["flops"],
            acc=summary["test_acc"], fraction=snap["fraction"]))
    size_path, frac_path = export_scaling_tables(points, args.out)
    print(f"wrote {size_path} and {frac_path} ({len(points)} runs)")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "spans": _cmd_spans,
    "gradcheck": _cmd_gradcheck,
    "export-plots": _cmd_export_plots,
}


def run(argv: list[str] | None = None) -> int:
    """Dispatch; 0 on success, 1 on validation errors, 2 on runtime failures."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and bad flags
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except errors.SpanAttnError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
