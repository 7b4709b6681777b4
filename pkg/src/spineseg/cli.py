"""Command-line front end tying the pieces together.

Subcommands: synth (make a dataset), train, eval, predict, gradcheck and
bench. Every run is deterministic for fixed flags and seed (bench timings
excepted), and every run that owns an output directory writes the fully
resolved configuration there so the artifact records how it was made.

Exit codes: 0 success, 1 bad command line, 2 unreadable/ill-formed data,
3 a check or acceptance gate failed.
"""

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from .augment import AugmentationConfig
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import block_checks, model_end_to_end_check, primitive_checks
from .kernels import backend_name
from .losses import LossWeights
from .metrics import evaluate_dataset
from .network import PAPER_CHANNELS, ModelConfig, build_model
from .pgm import PgmFormatError, read_pgm, write_mask, write_pgm
from .postprocess import postprocess_pipeline, threshold
from .synth import (SPLITS, generate_dataset, load_dataset, resize_with_pad,
                    write_dataset)
from .tensor import Tensor
from .train import TrainConfig, history_to_csv, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    """A semantically bad command line (flag values, not file contents)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is taken by data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.exit_code_usage(message))

    def exit_code_usage(self, message):
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        return EXIT_USAGE


# ---------------------------------------------------------------------------
# run configuration: defaults -> config file -> flags, echoed to the run dir

_MODEL_KEYS = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.default for f in dataclasses.fields(TrainConfig)
               if f.name not in ("weights", "augmentation")}
_AUG_KEYS = {f.name: f.default for f in dataclasses.fields(AugmentationConfig)}


def _default_settings():
    s = {f"model.{k}": v for k, v in _MODEL_KEYS.items()}
    s.update({f"train.{k}": v for k, v in _TRAIN_KEYS.items()})
    s.update({f"augment.{k}": v for k, v in _AUG_KEYS.items()})
    s["train.lambda_c"] = LossWeights.lambda_c
    s["train.lambda_f"] = LossWeights.lambda_f
    s["train.augment"] = True
    return s


def _coerce(key, old, text):
    """Parse text into the type the default value has."""
    text = text.strip()
    if isinstance(old, bool):
        if text.lower() in ("true", "on", "yes", "1"):
            return True
        if text.lower() in ("false", "off", "no", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(old, int):
        return int(text)
    if isinstance(old, float):
        return float(text)
    if isinstance(old, tuple):
        return tuple(int(t) for t in text.split(","))
    return text


def _load_config_file(path, settings):
    """Apply key = value lines from path onto settings, in place."""
    with open(path, "r", encoding="ascii") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in settings:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
            settings[key] = _coerce(key, settings[key], text)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(t) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_config(dirpath, settings):
    lines = [f"{k} = {_format_value(settings[k])}" for k in sorted(settings)]
    path = os.path.join(dirpath, "config.txt")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    return path


def _run_dir(out, run_name):
    name = run_name or time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(out, name)
    os.makedirs(path, exist_ok=True)
    return path


def _model_config(settings):
    kwargs = {k.split(".", 1)[1]: v for k, v in settings.items()
              if k.startswith("model.")}
    try:
        return ModelConfig(**kwargs).validate()
    except ValueError as e:
        raise UsageError(f"bad model configuration: {e}") from e


def _train_config(settings):
    kwargs = {k.split(".", 1)[1]: v for k, v in settings.items()
              if k.startswith("train.") and
              k.split(".", 1)[1] in _TRAIN_KEYS}
    weights = LossWeights(lambda_c=settings["train.lambda_c"],
                          lambda_f=settings["train.lambda_f"])
    aug = None
    if settings["train.augment"]:
        aug = AugmentationConfig(**{k.split(".", 1)[1]: v
                                    for k, v in settings.items()
                                    if k.startswith("augment.")})
    try:
        return TrainConfig(weights=weights, augmentation=aug,
                           **kwargs).validate()
    except ValueError as e:
        raise UsageError(f"bad training configuration: {e}") from e


def _apply_flag(settings, key, value):
    if value is not None:
        settings[key] = value


# ---------------------------------------------------------------------------
# subcommands


def _parse_counts(text):
    try:
        parts = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"--per-view expects integers, got {text!r}")
    if len(parts) == 1:
        n = parts[0]
        parts = (n, max(1, n // 4), max(1, n // 4))
    if len(parts) != 3:
        raise UsageError("--per-view takes one count or train,val,test")
    if min(parts) < 1:
        raise UsageError(f"per-view counts must be >= 1, got {parts}")
    return parts


def cmd_synth(args):
    counts = _parse_counts(args.per_view)
    cycle = tuple(q.strip() for q in args.quality_mix.split(","))
    try:
        datasets, manifest = generate_dataset(
            counts=counts, size=args.size, seed=args.seed, quality_cycle=cycle)
    except ValueError as e:
        raise UsageError(str(e)) from e
    os.makedirs(args.out, exist_ok=True)
    write_dataset(args.out, datasets, manifest)
    _write_config(args.out, {
        "synth.per_view": counts, "synth.size": args.size,
        "synth.seed": args.seed, "synth.quality_mix": cycle})
    total = sum(len(v) for v in datasets.values())
    sizes = "/".join(str(c) for c in counts)
    print(f"wrote {total} samples ({sizes} patients x {len(datasets)} views) "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args):
    # precedence: preset defaults, then the config file, then flags
    settings = _default_settings()
    if args.preset == "paper":
        settings["model.channels"] = PAPER_CHANNELS
        settings["model.input_size"] = 512
    if args.config:
        _load_config_file(args.config, settings)
    _apply_flag(settings, "model.input_size", args.input_size)
    _apply_flag(settings, "model.recurrence",
                _parse_ints(args.recurrence, "--recurrence"))
    _apply_flag(settings, "model.channels",
                _parse_ints(args.channels, "--channels"))
    _apply_flag(settings, "model.dropout_rate", args.dropout)
    _apply_flag(settings, "model.seed", args.seed)
    _apply_flag(settings, "train.seed", args.seed)
    _apply_flag(settings, "train.max_epochs", args.epochs)
    _apply_flag(settings, "train.lr0", args.lr)
    _apply_flag(settings, "train.lambda_c", args.lambda_c)
    _apply_flag(settings, "train.lambda_f", args.lambda_f)
    if args.channels:
        settings["model.levels"] = len(settings["model.channels"])
    for flag, key in (("no_r2jump", "model.use_r2jump"),
                      ("no_inception", "model.use_inception"),
                      ("no_mcskip", "model.use_mcskip"),
                      ("no_scse", "model.use_scse")):
        if getattr(args, flag):
            settings[key] = False
    if args.dropout_after_scse:
        settings["model.dropout_after_scse"] = True
    if args.no_augment:
        settings["train.augment"] = False

    model_cfg = _model_config(settings)
    train_cfg = _train_config(settings)
    datasets = {"train": load_dataset(args.data, "train"),
                "val": load_dataset(args.data, "val")}
    for s in datasets["train"] + datasets["val"]:
        if s.image.shape[0] != model_cfg.input_size:
            raise ValueError(
                f"dataset images are {s.image.shape[0]}px but the model "
                f"expects {model_cfg.input_size}px; regenerate or set "
                f"model.input_size")

    run = _run_dir(args.out, args.run_name)
    settings["data"] = args.data
    settings["out"] = run
    _write_config(run, settings)

    model = build_model(model_cfg, dtype=np.float32)
    print(f"training {model.count_parameters()} parameters on "
          f"{len(datasets['train'])} samples (backend: {backend_name()})")
    result = train(model, datasets, train_cfg)

    save_checkpoint(os.path.join(run, "best.ckpt"), result.best)
    save_checkpoint(os.path.join(run, "final.ckpt"), result.final)
    with open(os.path.join(run, "history.csv"), "w", encoding="ascii") as f:
        f.write(history_to_csv(result.history))
    best_val = min(v for _, v, _ in result.history)
    tag = "stopped early" if result.stopped_early else "ran to max_epochs"
    print(f"{len(result.history)} epochs ({tag}), best val loss "
          f"{best_val:.6f}; artifacts in {run}")
    return EXIT_OK


def _parse_ints(text, flag):
    if text is None:
        return None
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, "
                         f"got {text!r}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    samples = load_dataset(args.data, args.split)
    report = evaluate_dataset(model, samples,
                              postprocess=not args.no_postprocess)
    csv = report.to_csv()
    sys.stdout.write(csv)
    if args.out:
        run = _run_dir(args.out, args.run_name)
        with open(os.path.join(run, "metrics.csv"), "w",
                  encoding="ascii") as f:
            f.write(csv)
        _write_config(run, {
            "eval.checkpoint": args.checkpoint, "eval.data": args.data,
            "eval.split": args.split,
            "eval.postprocess": not args.no_postprocess})
    return EXIT_OK


def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    image = read_pgm(args.image)
    size = model.cfg.input_size
    if image.shape != (size, size):
        image = resize_with_pad(image, size)
    x = Tensor(image[None, None].astype(np.float32))
    _, fine = model.forward(x, mode="eval")
    prob = fine.data[0, 0]
    mask = threshold(prob) if args.no_postprocess else postprocess_pipeline(prob)

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    prob_path = os.path.join(args.out, f"{stem}_prob.pgm")
    mask_path = os.path.join(args.out, f"{stem}_mask.pgm")
    write_pgm(prob_path, prob)
    write_mask(mask_path, mask)
    print(prob_path)
    print(mask_path)
    return EXIT_OK


def cmd_gradcheck(args):
    dtype = np.float64 if args.bits == 64 else np.float32
    reports = []
    if not args.skip_primitives:
        reports += primitive_checks(dtype=dtype, seed=args.seed)
    reports += block_checks(dtype=dtype, seed=args.seed)
    cfg = ModelConfig(input_size=16, dropout_rate=0.0, seed=args.seed)
    if args.preset == "paper":
        cfg = cfg.with_overrides(channels=PAPER_CHANNELS)
    reports.append(model_end_to_end_check(
        dtype=dtype, seed=args.seed, coords_total=args.samples,
        cfg=cfg, tol=args.tol))
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed "
          f"({np.dtype(dtype).name}, preset {args.preset})")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_bench(args):
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).build_model()
    else:
        preset = (ModelConfig.paper if args.preset == "paper"
                  else ModelConfig.desk)
        try:
            cfg = preset(input_size=args.size).validate()
        except ValueError as e:
            raise UsageError(str(e)) from e
        model = build_model(cfg, dtype=np.float32)
    size = model.cfg.input_size
    n_params = model.count_parameters()
    print(f"parameters: {n_params} ({n_params / 1e6:.2f} M)")
    if tuple(model.cfg.channels) == PAPER_CHANNELS:
        print("note: the original experiments report 16.5 M parameters "
              "at this scale")
    print(f"kernel backend: {backend_name()}")

    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.standard_normal((1, 1, size, size)).astype(np.float32))
    for _ in range(args.warmup):
        model.forward(x, mode="eval")
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        model.forward(x, mode="eval")
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    mean_ms = 1e3 * float(times.mean())
    std_ms = 1e3 * float(times.std())
    print(f"forward {size}x{size}: {mean_ms:.2f} ms/image "
          f"(sigma {std_ms:.2f} ms, {args.iters} iters "
          f"after {args.warmup} warmup)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = _Parser(prog="spineseg",
                     description="two-stage spine segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--per-view", default="24",
                   help="patients per view: one count (val/test get a "
                        "quarter each) or train,val,test")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quality-mix", default="high,medium,low",
                   help="comma list cycled over patients")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset root (from synth)")
    p.add_argument("--out", required=True, help="where run directories go")
    p.add_argument("--run-name", help="run directory name "
                                      "(default: timestamp)")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int, help="model init + sampling seed")
    p.add_argument("--input-size", type=int)
    p.add_argument("--channels", help="comma list, one per level")
    p.add_argument("--recurrence", help="refinement steps per level, "
                                        "e.g. 4,3,2,1")
    p.add_argument("--lambda-c", type=float, help="coarse loss weight")
    p.add_argument("--lambda-f", type=float, help="fine loss weight")
    p.add_argument("--dropout", type=float, help="bottleneck dropout rate")
    p.add_argument("--dropout-after-scse", action="store_true",
                   help="apply dropout after the attention gate")
    p.add_argument("--no-r2jump", action="store_true",
                   help="plain skips instead of recurrent refinement")
    p.add_argument("--no-inception", action="store_true",
                   help="plain double-conv blocks instead of multi-path")
    p.add_argument("--no-mcskip", action="store_true",
                   help="drop coarse-to-fine cross-stage connections")
    p.add_argument("--no-scse", action="store_true",
                   help="drop the bottleneck attention gate")
    p.add_argument("--no-augment", action="store_true",
                   help="train on raw samples")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--no-postprocess", action="store_true",
                   help="bare 0.5 threshold, no cleanup")
    p.add_argument("--out", help="also write metrics.csv under a run dir")
    p.add_argument("--run-name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PGM")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-postprocess", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of every gradient")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="channel widths for the end-to-end check")
    p.add_argument("--bits", type=int, choices=(32, 64), default=32,
                   help="arithmetic width to check in")
    p.add_argument("--tol", type=float,
                   help="end-to-end bar (default 1e-2 for 32, 1e-4 for 64)")
    p.add_argument("--samples", type=int, default=50,
                   help="parameter coordinates for the end-to-end check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-primitives", action="store_true",
                   help="only block and end-to-end checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="parameter count and forward latency")
    p.add_argument("--checkpoint", help="time this model")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="used when no checkpoint is given")
    p.add_argument("--size", type=int, default=64,
                   help="input side length (preset mode)")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"spineseg {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PgmFormatError, CheckpointError) as e:
        print(f"spineseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"spineseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as e:
        print(f"spineseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
