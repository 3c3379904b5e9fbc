"""Command-line front end: ``bsimlab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from pathlib import Path

import numpy as np

from . import equilibrium as eq
from .datagen import LabeledImageSet, desk_benchmark, load_cifar_binary, save_cifar_binary, synth_shapes
from .ndgrad import DegenerateNorm
from .evalkit import (
    color_histogram_features,
    export_embeddings,
    extract_features,
    knn_eval,
    linear_probe,
)
from .trainkit import TrainConfig, load_checkpoint, online_params, running_stats, save_checkpoint, train
from .verify import GRAD_TOL, gradient_suite

CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.bsim"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config flags


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_optional_float(text: str):
    return None if text.lower() in ("none", "null") else float(text)


def _field_parser(tp):
    if tp is bool:
        return _parse_bool
    if tp in (int, float, str):
        return tp
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        return _parse_int_tuple
    if origin is typing.Union and type(None) in args:
        return _parse_optional_float
    if origin is typing.Literal:
        return str
    raise TypeError(f"no flag parser for {tp!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    hints = typing.get_type_hints(TrainConfig)
    for f in dataclasses.fields(TrainConfig):
        tp = hints[f.name]
        kwargs = {"type": _field_parser(tp), "default": None, "dest": f"cfg_{f.name}"}
        if typing.get_origin(tp) is typing.Literal:
            kwargs["choices"] = list(typing.get_args(tp))
        p.add_argument(_flag(f.name), **kwargs)


def resolve_config(args) -> TrainConfig:
    """Config file values, overridden by flags, with BSIM_SEED as the seed fallback."""
    values: dict = {}
    if args.config:
        values = json.loads(Path(args.config).read_text())
        if not isinstance(values, dict):
            raise ValueError("config file must hold a JSON object")
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    if "seed" not in values and os.environ.get("BSIM_SEED"):
        values["seed"] = int(os.environ["BSIM_SEED"])
    return TrainConfig.from_dict(values)


def load_data(cfg: TrainConfig, test_path: str | None = None) -> tuple[LabeledImageSet, LabeledImageSet | None]:
    if cfg.data == "synth":
        return desk_benchmark(
            seed=cfg.data_seed, classes=cfg.synth_classes, train_per_class=cfg.synth_train_per_class,
            test_per_class=cfg.synth_test_per_class, size=cfg.synth_size,
        )
    return load_cifar_binary(cfg.data), load_cifar_binary(test_path) if test_path else None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        cfg = TrainConfig.from_dict(resume.config)
    else:
        cfg = resolve_config(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / CONFIG_NAME, cfg.to_dict())
    train_set, _ = load_data(cfg)
    echo = (lambda r: print(r.to_json(), flush=True)) if args.verbose else None
    ck, records = train(
        cfg, train_set, resume=resume, max_steps=args.max_steps,
        metrics_path=out / METRICS_NAME, on_record=echo,
    )
    save_checkpoint(out / CHECKPOINT_NAME, ck)
    last = records[-1].loss if records else None
    print(json.dumps({"steps": ck.step, "final_loss": last, "out": str(out)}))
    return 0


def _checkpoint_features(path: str, test_path: str | None):
    ck = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ck.config)
    train_set, test_set = load_data(cfg, test_path)
    return ck, cfg, train_set, test_set


def cmd_eval(args) -> int:
    ck, cfg, train_set, test_set = _checkpoint_features(args.checkpoint, args.test_data)
    if test_set is None:
        raise UsageError("evaluating a CIFAR-trained checkpoint needs --test-data")
    params, running = online_params(ck), running_stats(ck)
    ftr = extract_features(params, train_set, cfg.conv_strides, running)
    fte = extract_features(params, test_set, cfg.conv_strides, running)
    hist = linear_probe(color_histogram_features(train_set), color_histogram_features(test_set))
    probe = linear_probe(ftr, fte)
    result = {
        "linear_probe": probe.test_accuracy,
        "linear_probe_train": probe.train_accuracy,
        "knn": knn_eval(ftr, fte, k=args.k),
        "color_histogram_probe": hist.test_accuracy,
        "step": ck.step,
    }
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    ck, cfg, train_set, test_set = _checkpoint_features(args.checkpoint, args.test_data)
    data = train_set if args.split == "train" else test_set
    if data is None:
        raise UsageError("no test split available; pass --test-data")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    feats = export_embeddings(online_params(ck), data, args.out, cfg.conv_strides, running_stats(ck))
    print(json.dumps({"rows": len(feats), "dim": feats.features.shape[1], "out": args.out}))
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_suite(n=args.batch, seed=args.seed)
    ok = all(e < GRAD_TOL for e in errors.values())
    print(json.dumps({"max_rel_error": errors, "tolerance": GRAD_TOL, "pass": ok}, sort_keys=True))
    return 0 if ok else 2


def cmd_equilibrium(args) -> int:
    rng = np.random.default_rng(args.seed)
    prob = eq.SphereProblem.random(args.dim, rng, lam=args.lam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z0 = rng.standard_normal(args.dim)
    report = {"lambda": prob.lam, "dim": prob.dim, "s": eq.gradient_scale(prob)}
    for variant in ("v0", "v1"):
        traj = eq.projected_gd(prob, variant, eta=args.eta, max_iters=args.max_iters, z0=z0)
        traj.to_csv(out / f"trajectory_{variant}.csv")
        report[f"cosdist_{variant}"] = traj.cosdist[-1]
        report[f"iters_{variant}"] = len(traj.cosdist) - 1
        report[f"converged_{variant}"] = traj.converged
    _write_json(out / CONFIG_NAME, {"lambda": args.lam, "dim": args.dim, "seed": args.seed,
                                    "eta": args.eta, "max_iters": args.max_iters})
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_datagen(args) -> int:
    data = synth_shapes(args.classes, args.per_class, args.size, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cifar_binary(data, out)
    print(json.dumps({"records": len(data), "classes": data.class_names, "out": str(out)}))
    return 0


# ---------------------------------------------------------------------------


def _default_seed() -> int:
    env = os.environ.get("BSIM_SEED")
    return int(env) if env else 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bsimlab", description="Mixed-instance contrastive learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model; writes metrics, checkpoint and config")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from (its config is used)")
    t.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    t.add_argument("--verbose", action="store_true", help="echo metrics to standard output")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear probe, kNN and color-histogram baseline")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-data", help="CIFAR binary test file (when trained on CIFAR data)")
    e.add_argument("--k", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="central-difference checks of every loss")
    g.add_argument("--seed", type=int, default=_default_seed())
    g.add_argument("--batch", type=int, default=8)
    g.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("equilibrium", help="projected GD on both BYOL mixed-target objectives")
    q.add_argument("--lambda", dest="lam", type=float, default=0.5)
    q.add_argument("--dim", type=int, default=16)
    q.add_argument("--seed", type=int, default=_default_seed())
    q.add_argument("--eta", type=float, default=0.1)
    q.add_argument("--max-iters", type=int, default=100_000)
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_equilibrium)

    d = sub.add_parser("datagen", help="render synthetic shapes to a CIFAR-format binary")
    d.add_argument("--classes", type=int, default=4)
    d.add_argument("--per-class", type=int, default=250)
    d.add_argument("--size", type=int, default=32)
    d.add_argument("--seed", type=int, default=_default_seed())
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_datagen)

    x = sub.add_parser("export-embeddings", help="write encoder features as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", choices=["train", "test"], default="test")
    x.add_argument("--test-data")
    x.set_defaults(func=cmd_export)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (DegenerateNorm, FloatingPointError) as exc:
        print(f"bsimlab: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"bsimlab: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"bsimlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
