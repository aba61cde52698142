"""Command-line entry point.

Subcommands: ``synth`` (generate a labeled shape dataset on disk), ``train``,
``eval`` (with optional voting, subsampling, and noise injection),
``gradcheck`` (finite-difference sweep of both full models), ``ablate``
(sweep families emitting CSV), ``bench`` (latency/memory), and ``complexity``
(parameter/FLOP accounting).

Exit codes:
    0  success
    1  unexpected internal error
    2  usage error (argument parsing)
    3  configuration error (bad config file, hyperparameters, sweep spec)
    4  data error (malformed files, missing splits, label mismatches)
    5  checkpoint error (bad magic/version, truncation, parameter mismatch)
    6  non-finite value during training or evaluation
    7  gradient check found failures
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback

import numpy as np

from . import autodiff as ad
from . import data as D
from . import harness as H
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    ModelConfig,
    classifier_config,
    complexity,
    lite_config,
    scaled_classifier_config,
    segmenter_config,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_NONFINITE = 6
EXIT_GRADCHECK = 7

_SHAPE_NAMES = ["sphere", "cube", "cylinder", "torus"]


# ---------------------------------------------------------------------------
# config and dataset loading


def _builtin_model_dict(spec: dict) -> dict:
    """Expand ``{"builtin": name, ...}`` into a full architecture dict."""
    known = {"builtin", "n_outputs", "n_groups", "use_residual", "levels"}
    unknown = set(spec) - known
    if unknown:
        raise ad.ConfigError(f"unknown builtin model fields: {sorted(unknown)}")
    name = spec["builtin"]
    kw = {
        k: spec[k] for k in ("n_groups", "use_residual") if k in spec
    }
    if name == "classifier":
        cfg = classifier_config(spec.get("n_outputs", 40), **kw)
    elif name == "lite":
        cfg = lite_config(spec.get("n_outputs", 40), **kw)
    elif name == "segmenter":
        if "n_outputs" not in spec:
            raise ad.ConfigError("builtin 'segmenter' needs n_outputs (part count)")
        cfg = segmenter_config(spec["n_outputs"], **kw)
    elif name == "scaled":
        if "levels" not in spec:
            raise ad.ConfigError("builtin 'scaled' needs a levels count")
        cfg = scaled_classifier_config(spec["levels"], spec.get("n_outputs", 40), **kw)
    else:
        raise ad.ConfigError(
            f"unknown builtin model {name!r}; valid: classifier, lite, segmenter, scaled"
        )
    return cfg.to_dict()


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ad.ConfigError(f"cannot read {what} {path!r}: {e}") from None
    except json.JSONDecodeError as e:
        raise ad.ConfigError(f"{what} {path!r} is not valid JSON: {e}") from None


def _load_train_config(path: str, args) -> H.TrainConfig:
    d = _read_json(path, "config")
    if isinstance(d.get("model"), dict) and "builtin" in d["model"]:
        d = dict(d, model=_builtin_model_dict(d["model"]))
    cfg = H.TrainConfig.from_dict(d)
    if getattr(args, "seed", None) is not None:
        cfg = H.TrainConfig.from_dict(dict(cfg.to_dict(), seed=args.seed))
    if getattr(args, "points", None) is not None:
        cfg = H.TrainConfig.from_dict(dict(cfg.to_dict(), n_points=args.points))
    return cfg


def _load_model_config(path: str | None, builtin: str | None) -> ModelConfig:
    if path is not None:
        d = _read_json(path, "config")
        if "model" in d and isinstance(d["model"], dict):
            d = d["model"]
        if "builtin" in d:
            d = _builtin_model_dict(d)
        return ModelConfig.from_dict(d)
    spec = json.loads(builtin) if builtin and builtin.startswith("{") else {"builtin": builtin or "classifier"}
    return ModelConfig.from_dict(_builtin_model_dict(spec))


def _load_manifest(path: str, task: str) -> D.DatasetManifest:
    """A dataset argument is a manifest file, a directory holding
    ``manifest.json``, or an importable ``root/<class>/<train|test>/*.xyzn``
    tree."""
    if os.path.isfile(path):
        return D.DatasetManifest.load(path)
    if os.path.isdir(path):
        inner = os.path.join(path, "manifest.json")
        if os.path.isfile(inner):
            return D.DatasetManifest.load(inner)
        importer = D.import_partnet if task == "segmentation" else D.import_modelnet
        return importer(path)
    raise D.DataFormatError(f"{path}: no such file or directory")


def _load_split(manifest: D.DatasetManifest, split: str) -> list[D.PointCloud]:
    entries = getattr(manifest, split)
    if not entries:
        raise D.DataFormatError(f"dataset has no {split!r} entries")
    return [D.load_entry(e) for e in entries]


def _load_checkpoint_file(path: str):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from None


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    if args.test_per_class >= args.per_class:
        raise ad.ConfigError(
            f"--test-per-class {args.test_per_class} must be below --per-class {args.per_class}"
        )
    clouds = D.synth_shapes(args.per_class, args.points, args.seed, args.variant)
    train, test = D.split_synth(clouds, args.per_class - args.test_per_class)
    manifest = D.DatasetManifest(class_names=list(_SHAPE_NAMES))
    os.makedirs(args.out_dir, exist_ok=True)
    counters: dict[tuple[int, str], int] = {}
    for split, subset in (("train", train), ("test", test)):
        for c in subset:
            i = counters.get((c.label, split), 0)
            counters[(c.label, split)] = i + 1
            d = os.path.join(args.out_dir, _SHAPE_NAMES[c.label], split)
            os.makedirs(d, exist_ok=True)
            path = os.path.abspath(os.path.join(d, f"{i:04d}.xyzn"))
            D.write_xyzn(path, c)
            getattr(manifest, split).append((path, c.label))
    manifest.save(os.path.join(args.out_dir, "manifest.json"))
    print(
        f"wrote {len(train)} train / {len(test)} test clouds "
        f"({args.points} points, {args.variant}) under {args.out_dir}"
    )
    return EXIT_OK


def _write_log_csv(path: str, log: list[H.EpochStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_metric"])
        for s in log:
            w.writerow([s.epoch, s.lr, s.train_loss, "" if s.val_metric is None else s.val_metric])


def _cmd_train(args) -> int:
    cfg = _load_train_config(args.config, args)
    manifest = _load_manifest(args.data, cfg.model.task)
    train_set = _load_split(manifest, "train")
    val_set = [D.load_entry(e) for e in manifest.test]
    os.makedirs(args.out_dir, exist_ok=True)

    def log_fn(s: H.EpochStats) -> None:
        msg = f"epoch {s.epoch:3d}  lr {s.lr:.6f}  loss {s.train_loss:.4f}"
        if s.val_metric is not None:
            msg += f"  val {s.val_metric:.4f}"
        print(msg, flush=True)

    result = H.train(cfg, train_set, val_set=val_set or None, log_fn=log_fn)
    final_path = os.path.join(args.out_dir, "final.marc")
    save_checkpoint(final_path, result.final)
    written = [final_path]
    if result.best is not None:
        best_path = os.path.join(args.out_dir, "best.marc")
        save_checkpoint(best_path, result.best)
        written.append(best_path)
    _write_log_csv(os.path.join(args.out_dir, "log.csv"), result.log)
    print("wrote " + ", ".join(written))
    return EXIT_OK


def _prepare_eval_clouds(clouds: list[D.PointCloud], args) -> list[D.PointCloud]:
    if args.points is not None:
        clouds = [D.sample_points(c, args.points, "fps") for c in clouds]
    if args.noise:
        clouds = [
            D.inject_noise(c, args.noise, np.random.default_rng([args.seed, 7, i]))
            for i, c in enumerate(clouds)
        ]
    return clouds


def _cmd_eval(args) -> int:
    ckpt = _load_checkpoint_file(args.checkpoint)
    model = H.model_from_checkpoint(ckpt)
    manifest = _load_manifest(args.data, model.config.task)
    clouds = _prepare_eval_clouds(_load_split(manifest, args.split), args)
    n_threads = 1 if args.deterministic else args.threads
    report = H.evaluate(model, clouds, voting=args.voting, seed=args.seed, n_threads=n_threads)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    failed = False
    for name, res in H.gradient_suite(seed=args.seed, n_points=args.points):
        status = "ok" if res.ok else "FAIL"
        line = f"{name}: {status}  checked={res.n_checked}  max_rel_err={res.max_rel_err:.3e}"
        if res.note:
            line += f"  ({res.note})"
        print(line)
        for k, i, a, n, rel in res.failures:
            print(f"  tensor {k} element {i}: analytic={a:.6e} numeric={n:.6e} rel={rel:.3e}")
        failed = failed or not res.ok
    return EXIT_GRADCHECK if failed else EXIT_OK


def _parse_sweep_values(text: str) -> list:
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        try:
            values = [int(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise H.SweepError(
                f"--values {text!r} is neither JSON nor a comma-separated integer list"
            ) from None
    if not isinstance(values, list):
        raise H.SweepError(f"--values must be a list, got {type(values).__name__}")
    return values


def _cmd_ablate(args) -> int:
    cfg = _load_train_config(args.config, args)
    values = _parse_sweep_values(args.values)
    manifest = _load_manifest(args.data, cfg.model.task)
    train_set = _load_split(manifest, "train")
    test_set = _load_split(manifest, "test")
    rows = H.ablate(args.sweep, values, cfg, train_set, test_set)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"ablation_{args.sweep}.csv")
    text = H.ablation_csv(rows, path)
    print(text, end="")
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def _cmd_bench(args) -> int:
    ckpt = _load_checkpoint_file(args.checkpoint)
    model = H.model_from_checkpoint(ckpt)
    manifest = _load_manifest(args.data, model.config.task)
    clouds = _load_split(manifest, args.split)
    if args.points is not None:
        clouds = [D.sample_points(c, args.points, "fps") for c in clouds]
    report = H.bench(
        model, clouds, batch_size=args.batch_size, n_batches=args.batches, warmup=args.warmup
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_complexity(args) -> int:
    config = _load_model_config(args.config, args.builtin)
    report = complexity(config, n_points=args.points)
    if args.csv:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["layer", "params", "flops"])
        for c in report.per_layer:
            w.writerow([c.name, c.params, c.flops])
        w.writerow(["total", report.total_params, report.total_flops])
    else:
        print(report.table())
        print(f"\n({report.n_points} points; {report.convention})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marnet",
        description="Point-cloud classification/segmentation toolkit: "
        "training, evaluation, ablations, and complexity accounting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the labeled synthetic shape dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--per-class", type=int, default=10, help="clouds per class (train + test)")
    p.add_argument("--test-per-class", type=int, default=2)
    p.add_argument("--points", type=int, default=256, help="points per cloud")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--variant", choices=("classification", "segmentation"), default="classification"
    )
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", required=True, help="manifest file or dataset tree")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--points", type=int, default=None, help="override per-step resampling")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint, optionally with voting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--voting", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=None, help="farthest-point subsample size")
    p.add_argument("--noise", type=int, default=0, help="outlier points added per cloud")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true", help="force single-threaded evaluation")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of both full models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=16)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run one ablation sweep family")
    p.add_argument(
        "--sweep", required=True, choices=("toggles", "points", "noise", "groups", "levels")
    )
    p.add_argument("--values", required=True, help="JSON list or comma-separated integers")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("bench", help="inference latency and peak tensor memory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--points", type=int, default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("complexity", help="parameter and FLOP accounting")
    p.add_argument("--config", default=None, help="model (or training) config JSON")
    p.add_argument(
        "--builtin",
        default=None,
        help="builtin architecture name or JSON spec, e.g. "
        '\'{"builtin": "scaled", "levels": 5}\'',
    )
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=_cmd_complexity)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ad.ConfigError, H.SweepError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except D.DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ad.NonFiniteError as e:
        print(f"non-finite value: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
