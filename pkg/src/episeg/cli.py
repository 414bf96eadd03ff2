"""Command-line front end: ``episeg gen | train | eval | time``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Tuples are written comma separated. Every run writes its resolved
config (``config.txt``) next to its outputs; feeding it back with ``--config``
replays the run.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .baselines import (PREDICTOR_NAMES, BaselineTrainConfig, BaseFeatureNet, PredictorSet, SiameseMatcher,
                        SiameseTrainConfig, siamese_train, train_base_classifier)
from .checkpoint import CheckpointError
from .data import (DatasetError, SamplingError, SyntheticConfig, benchmark_set, build_folds, class_name,
                   generate_synthetic, load_dataset_dir, remap_to_fold, sample_episode, save_dataset,
                   split_holdout, write_manifest)
from .metrics import run_benchmark, time_report
from .model import ModelConfig, TwoBranchModel
from .tensor import NonFiniteError
from .training import TrainConfig, TrainingDiverged, TrainLog, fold_description, train, write_log

logger = logging.getLogger("episeg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "EPISEG_SEED"
NUM_FOLDS = 5
HOLDOUT_EVERY = 5
VAL_SEED = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# key = value configs

RUN_KEYS = ("kind", "data", "fold", "classes_per_fold", "val_episodes", "pixel_fraction")
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in ("seed", "image_size"))
TRAIN_KEYS = tuple(k for k in TrainConfig.keys() if k not in ("checkpoint_path", "val_episodes"))
ALL_TRAIN_KEYS = RUN_KEYS + MODEL_KEYS + TRAIN_KEYS


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path, allowed) -> dict:
    cfg = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise UsageError(f"{path}:{n}: unknown key {key!r}; allowed: {', '.join(allowed)}")
        cfg[key] = _parse_value(value)
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in cfg.items())


def _resolve_seed(flag: int | None, config_value: int | None = None, default: int = 7) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return default if config_value is None else config_value


# ---------------------------------------------------------------------------
# shared plumbing


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    root = Path(path)
    if not (root / "images").is_dir() or not (root / "labels").is_dir():
        raise UsageError(f"{root}: not a dataset directory (needs images/ and labels/)")
    try:
        return load_dataset_dir(root)
    except DatasetError as exc:
        raise UsageError(f"{root}: {exc}") from exc


def _fold(dataset, fold_index: int, classes_per_fold: int | None):
    n = len(dataset.catalog)
    if classes_per_fold is None:
        if n % NUM_FOLDS:
            raise UsageError(f"{n} classes do not split into {NUM_FOLDS} folds; pass --classes-per-fold")
        classes_per_fold = n // NUM_FOLDS
    try:
        return build_folds(n, classes_per_fold, fold_index), classes_per_fold
    except ValueError as exc:
        raise UsageError(f"build_folds: {exc}") from exc


def _splits(dataset, fold):
    """Train images / held-out images, remapped to the train and test label sets."""
    train_part, held_out = split_holdout(dataset, HOLDOUT_EVERY)
    return (remap_to_fold(train_part, fold.train_labels), remap_to_fold(held_out, fold.train_labels),
            remap_to_fold(held_out, fold.test_labels))


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _names(dataset):
    return {c: dataset.catalog.get(c, class_name(c)) for c in dataset.catalog}


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.classes < 4:
        raise UsageError(f"--classes {args.classes}: at least 4 classes are needed to form train/test folds")
    cfg = SyntheticConfig(num_images=args.images, image_size=args.size, num_classes=args.classes)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seed = _resolve_seed(args.seed)
    dataset = generate_synthetic(cfg, seed)
    out = _prepare_out(args.out)
    save_dataset(dataset, out)
    (out / "config.txt").write_text(format_config({"classes": args.classes, "images": args.images,
                                                   "size": args.size, "seed": seed}), encoding="utf-8")
    print(f"wrote {len(dataset)} images ({args.size}x{args.size}) to {out}")
    for c in sorted(dataset.catalog):
        print(f"  class {c:>2} {dataset.catalog[c]:<16} {len(dataset.carriers.get(c, ())):>5} images")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_config(args.config, ALL_TRAIN_KEYS) if args.config else {}
    for key in ("data", "fold", "kind", "classes_per_fold"):
        flag = getattr(args, key)
        if flag is not None:
            cfg[key] = flag
    cfg.setdefault("kind", "ours")
    if cfg["kind"] not in ("ours", "base", "siamese"):
        raise UsageError(f"unknown kind {cfg['kind']!r}; valid kinds: ours, base, siamese")
    if "fold" not in cfg:
        raise UsageError("--fold is required")
    dataset = _load_data(cfg.get("data"))
    fold, cfg["classes_per_fold"] = _fold(dataset, int(cfg["fold"]), cfg.get("classes_per_fold"))
    seed = _resolve_seed(args.seed, cfg.get("seed"))
    if args.iterations is not None:
        cfg["iterations"] = args.iterations
    cfg["seed"] = seed
    cfg["data"] = str(Path(cfg["data"]).resolve())
    train_ds, val_ds, _ = _splits(dataset, fold)
    train_kwargs = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    try:
        if cfg["kind"] == "ours":
            model_cfg = ModelConfig(image_size=dataset.images[0].shape[0], seed=seed,
                                    **{k: tuple(cfg[k]) if isinstance(cfg[k], tuple) else cfg[k]
                                       for k in MODEL_KEYS if k in cfg})
            model_cfg.validate()
            tcfg = TrainConfig(**train_kwargs)
        else:
            extra = {k: cfg[k] for k in ("iterations", "learning_rate", "momentum", "seed") if k in cfg}
            tcfg = (BaselineTrainConfig(**extra) if cfg["kind"] == "base"
                    else SiameseTrainConfig(pixel_fraction=cfg.get("pixel_fraction", 0.5), **extra))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    out = _prepare_out(args.out)
    ckpt = out / "model.ckpt"
    print(fold_description(fold))
    if cfg["kind"] == "ours":
        for k, v in model_cfg.to_dict().items():
            if k not in ("seed", "image_size"):
                cfg[k] = v
        for k in TRAIN_KEYS:
            cfg[k] = getattr(tcfg, k)
        cfg.setdefault("val_episodes", 50)
        (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
        tcfg.checkpoint_path = str(ckpt)
        rng = np.random.default_rng(VAL_SEED)
        val = [sample_episode(val_ds, 1, rng) for _ in range(int(cfg["val_episodes"]))]
        model = TwoBranchModel.init(model_cfg)
        log = TrainLog()
        try:
            train(model, train_ds, tcfg, val_episodes=val, log=log)
        except TrainingDiverged as exc:
            write_log(log, out / "train_log.csv")
            print(f"error: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
            return EXIT_RUNTIME
        write_log(log, out / "train_log.csv")
        model.save(ckpt)
        if log.val:
            print(f"final validation meanIoU {log.val[max(log.val)]:.4f}")
    else:
        for k in ("iterations", "learning_rate", "momentum", "seed"):
            cfg[k] = getattr(tcfg, k)
        if cfg["kind"] == "siamese":
            cfg["pixel_fraction"] = tcfg.pixel_fraction
        (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
        net = (train_base_classifier(train_ds, fold, tcfg) if cfg["kind"] == "base"
               else siamese_train(train_ds, fold, tcfg))
        net.save(ckpt)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _predictors(args) -> PredictorSet:
    try:
        return PredictorSet(model=TwoBranchModel.load(args.model) if args.model else None,
                            base_net=BaseFeatureNet.load(args.base_net) if args.base_net else None,
                            matcher=SiameseMatcher.load(args.siamese) if args.siamese else None)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc


def cmd_eval(args) -> int:
    if args.oracle is not None and args.oracle != "gt":
        raise UsageError("--oracle accepts only 'gt'")
    name = args.baseline or ("ours" if args.model else None)
    if name is None and args.oracle is None:
        raise UsageError("one of --model, --baseline or --oracle gt is required")
    if name is not None and name not in PREDICTOR_NAMES:
        raise UsageError(f"unknown baseline {name!r}; valid names: {', '.join(PREDICTOR_NAMES)}")
    if args.k < 1 or args.n < 1:
        raise UsageError("--k and --n must be >= 1")
    dataset = _load_data(args.data)
    fold, cpf = _fold(dataset, args.fold, args.classes_per_fold)
    seed = _resolve_seed(args.seed)
    if args.oracle == "gt":
        predictor, label = (lambda ep: ep.query_mask), "oracle-gt"
    else:
        try:
            predictor, label = _predictors(args).make(name), name
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    *_, test_ds = _splits(dataset, fold)
    try:
        episodes = benchmark_set(test_ds, fold, args.n, args.k, seed)
    except (DatasetError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _prepare_out(args.out)
    manifest = out / "manifest.jsonl"
    write_manifest(episodes, manifest)
    echo = {"predictor": label, "fold": args.fold, "classes_per_fold": cpf, "k": args.k, "N": args.n,
            "seed": seed, "manifest": manifest.name}
    report = run_benchmark(predictor, episodes, echo, workers=args.threads)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "config.txt").write_text(format_config({**echo, "data": str(Path(args.data).resolve())}),
                                    encoding="utf-8")
    print(report.format_table(_names(dataset)))
    if report.partial:
        print(f"error: benchmark aborted: {report.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_time(args) -> int:
    try:
        ks = tuple(sorted({int(k) for k in args.k.split(",") if k.strip()}))
    except ValueError as exc:
        raise UsageError(f"--k expects a comma separated list of integers, got {args.k!r}") from exc
    if not ks or ks[0] < 1:
        raise UsageError("--k values must be >= 1")
    if args.repeats < 0:
        raise UsageError("--repeats must be >= 0")
    dataset = _load_data(args.data)
    fold, _ = _fold(dataset, args.fold, args.classes_per_fold)
    preds = _predictors(args)
    names = [n for n in (args.only.split(",") if args.only else preds.available()) if n]
    try:
        predictors = {n: preds.make(n) for n in names}
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from exc
    *_, test_ds = _splits(dataset, fold)
    episodes = benchmark_set(test_ds, fold, args.n, ks[-1], _resolve_seed(args.seed)) if args.repeats else []
    table = time_report(predictors, episodes, args.repeats, ks)
    print(table.format_table())
    if args.out:
        out = _prepare_out(args.out)
        (out / "timing.csv").write_text(table.to_csv(), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="episeg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=1, help="max parallel benchmark workers")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--images", type=int, default=600)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the two-branch model or a baseline network")
    t.add_argument("--data")
    t.add_argument("--fold", type=int)
    t.add_argument("--classes-per-fold", type=int, dest="classes_per_fold")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--kind", choices=("ours", "base", "siamese"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    def checkpoints(sp):
        sp.add_argument("--model", help="two-branch checkpoint")
        sp.add_argument("--base-net", dest="base_net", help="base network checkpoint (nn1, logreg, finetune)")
        sp.add_argument("--siamese", help="Siamese matcher checkpoint")

    e = sub.add_parser("eval", help="score one predictor on the test-fold benchmark")
    e.add_argument("--data", required=True)
    e.add_argument("--fold", type=int, required=True)
    e.add_argument("--classes-per-fold", type=int, dest="classes_per_fold")
    checkpoints(e)
    e.add_argument("--baseline", help=f"one of {', '.join(PREDICTOR_NAMES)}")
    e.add_argument("--oracle", help="'gt' scores the ground truth itself")
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("time", help="inference seconds per episode for each support size")
    m.add_argument("--data", required=True)
    m.add_argument("--fold", type=int, required=True)
    m.add_argument("--classes-per-fold", type=int, dest="classes_per_fold")
    checkpoints(m)
    m.add_argument("--only", help="comma separated predictor names (default: all loaded)")
    m.add_argument("--k", default="1,5")
    m.add_argument("--repeats", type=int, default=3)
    m.add_argument("--n", type=int, default=20)
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_time)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("episeg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"episeg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SamplingError, NonFiniteError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"episeg {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
