"""Command-line interface.

Subcommands: gen-data, train, eval, compare, gradcheck, predict. Every
parameter can come from flags or from a JSON config file (--config) with
sections named after the config dataclasses ("scene", "gen", "model",
"train", "loss", "preproc"); flags override file values. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gradsuite, harness, model, synthdata
from .harness import TrainConfig
from .objective import LongLossParams
from .preproc import PreprocConfig, preprocess_clip
from .rng import Rng
from .synthdata import GenSpec, SceneConfig, load_clip, load_manifest


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> Parser:
    p = Parser(prog="gestrec", description="Long-range gesture recognition pipeline")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp):
        sp.add_argument("--seed", type=int, default=None,
                        help="master seed (default 0 unless the config file sets one)")
        sp.add_argument("--config", type=str, default=None,
                        help="JSON config file; flags override its values")

    g = sub.add_parser("gen-data", help="generate a synthetic train/test dataset")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train-per-meter", type=int, default=None)
    g.add_argument("--test-per-meter", type=int, default=None)

    t = sub.add_parser("train", help="train a model on a dataset manifest")
    common(t)
    t.add_argument("--data", required=True, help="training manifest CSV")
    t.add_argument("--eval-data", default=None, help="optional eval manifest CSV")
    t.add_argument("--out", default=None, help="where to write the training log (JSON)")
    t.add_argument("--checkpoint", default=None, help="checkpoint output path")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--loss", choices=["ce", "longloss"], default=None)
    t.add_argument("--alpha", type=float, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=None, help="report JSON path (default: stdout)")

    c = sub.add_parser("compare", help="paired CE vs LongLoss training runs")
    common(c)
    c.add_argument("--train-data", required=True)
    c.add_argument("--test-data", required=True)
    c.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated run seeds")
    c.add_argument("--epochs", type=int, default=None)
    c.add_argument("--alpha", type=float, default=None)
    c.add_argument("--out", required=True, help="comparison CSV path")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(gc)
    gc.add_argument("--precision", choices=["f32", "f64"], default="f64")
    gc.add_argument("--tol", type=float, default=None,
                    help="default 1e-4 for f64, 1e-2 for f32")
    gc.add_argument("--instances", type=int, default=3, help="seeded instances per op")

    pr = sub.add_parser("predict", help="classify one clip file")
    common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--clip", required=True, help="GVID clip file")
    pr.add_argument("--out", default=None, help="prediction JSON path (default: stdout)")
    return p


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _dataclass_from(section: dict, cls, **overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(section) - known
    if bad:
        raise UsageError(f"unknown {cls.__name__} fields in config: {sorted(bad)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("frame_hw", "out_hw", "input_hw"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    return cls(**merged)


def _loss_params(cfg_file: dict, alpha=None) -> LongLossParams:
    return _dataclass_from(cfg_file.get("loss", {}), LongLossParams, alpha=alpha)


def _model_config(cfg_file: dict) -> model.SftConfig:
    return _dataclass_from(cfg_file.get("model", {}), model.SftConfig)


def _pre_config(cfg_file: dict, model_cfg: model.SftConfig) -> PreprocConfig:
    section = dict(cfg_file.get("preproc", {}))
    section.setdefault("k", model_cfg.k)
    section.setdefault("out_hw", list(model_cfg.input_hw))
    return _dataclass_from(section, PreprocConfig)


def _cmd_gen_data(args) -> int:
    cfg_file = _load_config(args.config)
    scene = _dataclass_from(cfg_file.get("scene", {}), SceneConfig)
    gen_section = cfg_file.get("gen", {})
    train_count = args.train_per_meter or gen_section.get("train_per_meter", 40)
    test_count = args.test_per_meter or gen_section.get("test_per_meter", 10)
    seed = args.seed if args.seed is not None else gen_section.get("seed", 0)
    out = Path(args.out)
    t0 = time.time()
    train_manifest = synthdata.generate_dataset(
        GenSpec(per_meter_count=train_count, split="train"), scene, out, seed)
    test_manifest = synthdata.generate_dataset(
        GenSpec(per_meter_count=test_count, split="test"), scene, out, seed)
    print(f"wrote {len(train_manifest.records)} train / {len(test_manifest.records)} test "
          f"clips to {out} in {time.time() - t0:.1f}s")
    return 0


def _cmd_train(args) -> int:
    cfg_file = _load_config(args.config)
    model_cfg = _model_config(cfg_file)
    train_cfg = _dataclass_from(
        cfg_file.get("train", {}), TrainConfig,
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        seed=args.seed, loss_mode=args.loss, checkpoint_path=args.checkpoint)
    if isinstance(train_cfg.loss_params, dict):
        train_cfg.loss_params = LongLossParams(**train_cfg.loss_params)
    if args.alpha is not None:
        train_cfg.loss_params = dataclasses.replace(train_cfg.loss_params, alpha=args.alpha)
    pre_cfg = _pre_config(cfg_file, model_cfg)
    manifest = load_manifest(args.data)
    eval_manifest = load_manifest(args.eval_data) if args.eval_data else None
    t0 = time.time()
    params, logs = harness.train(manifest, model_cfg, train_cfg, pre_cfg, eval_manifest)
    elapsed = time.time() - t0
    payload = {
        "elapsed_s": elapsed,
        "epochs": [{"epoch": l.epoch, "train_loss": l.train_loss,
                    "eval": l.eval_metrics} for l in logs],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                                  encoding="utf-8")
    print(f"trained {train_cfg.epochs} epochs in {elapsed:.1f}s, "
          f"final train loss {logs[-1].train_loss:.4f}")
    if train_cfg.checkpoint_path:
        print(f"checkpoint written to {train_cfg.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg_file = _load_config(args.config)
    params = model.load_checkpoint(args.checkpoint)
    pre_cfg = _pre_config(cfg_file, params.cfg)
    manifest = load_manifest(args.data)
    report = harness.evaluate(manifest, params, _loss_params(cfg_file), pre_cfg)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report written to {args.out}")
    else:
        print(text, end="")
    return 0


def _cmd_compare(args) -> int:
    cfg_file = _load_config(args.config)
    model_cfg = _model_config(cfg_file)
    train_cfg = _dataclass_from(cfg_file.get("train", {}), TrainConfig, epochs=args.epochs)
    if isinstance(train_cfg.loss_params, dict):
        train_cfg.loss_params = LongLossParams(**train_cfg.loss_params)
    if args.alpha is not None:
        train_cfg.loss_params = dataclasses.replace(train_cfg.loss_params, alpha=args.alpha)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    pre_cfg = _pre_config(cfg_file, model_cfg)
    rows = harness.compare_losses_from_manifests(
        load_manifest(args.train_data), load_manifest(args.test_data),
        model_cfg, seeds, train_cfg, pre_cfg, out_csv=args.out)
    for r in rows:
        print(f"seed={r.seed:>4} mode={r.loss_mode:<8} acc={r.accuracy:.3f} "
              f"mAP={r.mean_ap:.3f} far_acc={r.far_accuracy:.3f}")
    print(f"comparison CSV written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.precision == "f64" else np.float32
    tol = args.tol if args.tol is not None else (1e-4 if dtype == np.float64 else 1e-2)
    seeds = list(range(args.instances))
    worst: dict[str, float] = {}
    for name, _seed, report in gradsuite.run_suite(seeds, tol=tol, dtype=dtype,
                                                   composite_seeds=seeds[:1]):
        worst[name] = max(worst.get(name, 0.0), report.max_rel_err)
    ok = True
    for name in sorted(worst):
        passed = worst[name] < tol
        ok = ok and passed
        print(f"{name:<24} max_rel_err={worst[name]:.3e}  "
              f"{'ok' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} at tol {tol:g} ({args.precision})")
    return 0 if ok else 2


def _cmd_predict(args) -> int:
    params = model.load_checkpoint(args.checkpoint)
    cfg_file = _load_config(args.config)
    pre_cfg = _pre_config(cfg_file, params.cfg)
    clip = load_clip(args.clip)
    frames = preprocess_clip(clip, pre_cfg, rng=Rng(args.seed or 0))
    cls, probs = model.predict(frames, params)
    payload = {"class_id": cls,
               "class_name": synthdata.GESTURE_CLASSES[cls].name
               if cls < len(synthdata.GESTURE_CLASSES) else str(cls),
               "probabilities": [float(p) for p in probs]}
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "gradcheck": _cmd_gradcheck,
    "predict": _cmd_predict,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
