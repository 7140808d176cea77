"""Command-line entry point: ``wnet {preprocess,train,crossval,evaluate,finetune,predict}``.

Progress goes to stderr; machine-readable results go to the declared output
files (``predict`` and ``finetune --dry-run`` print one JSON document to
stdout). Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import SampleStore, iteration_counts, load_manifest
from .harness import TrainConfig, cross_validate, evaluate, train
from .model import CLASS_NAMES, ModelConfig, build_wnet
from .preprocess import NORMALIZE_SCHEMES, PreprocessConfig, load_image, preprocess_pipeline
from .rng import INIT_STREAM, TRAIN_STREAM, make_rng

log = logging.getLogger("wnet")

SUBCOMMANDS = ("preprocess", "train", "crossval", "evaluate", "finetune", "predict")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class CommandPlan:
    subcommand: str
    seed: int = 0
    train_config: TrainConfig = None
    model_config: ModelConfig = None
    preprocess_config: PreprocessConfig = None
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)


def _seed_default():
    env = os.environ.get("WNET_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise SystemExit(f"wnet: WNET_SEED must be an integer, got {env!r}") from None


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _keep_prob(text):
    v = float(text)
    if not (0.0 < v <= 1.0):
        raise argparse.ArgumentTypeError(f"keep probability must lie in (0, 1], got {text}")
    return v


def _add_seed(p):
    p.add_argument("--seed", type=_nonneg_int, default=None,
                   help="master seed (falls back to $WNET_SEED, then 0)")


def _add_training(p, epochs=500):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    g.add_argument("--batch-size", type=_pos_int, default=5)
    g.add_argument("--epochs", type=_nonneg_int, default=epochs)
    g.add_argument("--dropout-keep", type=_keep_prob, default=0.6, help="dropout keep probability")
    g.add_argument("--precision", choices=("single", "double"), default="single")
    g.add_argument("--eval-every", type=_nonneg_int, default=0,
                   help="epochs between held-out evaluations (needs --eval-data; 0 disables)")
    _add_seed(p)


def _add_preprocess(p):
    g = p.add_argument_group("preprocessing")
    g.add_argument("--crop", type=_nonneg_int, nargs=4, default=[80, 81, 80, 80],
                   metavar=("TOP", "BOTTOM", "LEFT", "RIGHT"))
    g.add_argument("--size", type=_pos_int, default=128, help="square output size after resizing")
    g.add_argument("--normalize", choices=NORMALIZE_SCHEMES, default="per_image_standardize")


def _add_architecture(p):
    g = p.add_argument_group("architecture (defaults reproduce W-Net)")
    g.add_argument("--filters", type=_pos_int, nargs="+", default=[16, 32, 64])
    g.add_argument("--fc1", type=_pos_int, default=1024)


def build_parser():
    parser = argparse.ArgumentParser(prog="wnet", description="W-Net white-blood-cell classifier")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors on stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("preprocess", help="crop, resize and normalise a directory of images")
    p.add_argument("--input", required=True, help="directory of PNG/JPEG images")
    p.add_argument("--output", required=True, help="output directory for .wnt tensor files")
    _add_preprocess(p)

    p = sub.add_parser("train", help="train a fresh model on a manifest")
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--eval-data", help="held-out manifest for --eval-every")
    p.add_argument("--no-optimizer-state", action="store_true", help="omit Adam state from the checkpoint")
    _add_training(p)
    _add_preprocess(p)
    _add_architecture(p)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--report", required=True, help="CSV report path")
    p.add_argument("--report-json", help="JSON report path (default: --report with .json suffix)")
    p.add_argument("--jobs", type=_pos_int, default=1, help="folds trained in parallel")
    _add_training(p)
    _add_preprocess(p)
    _add_architecture(p)

    p = sub.add_parser("evaluate", help="confusion matrix and accuracies of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path")

    p = sub.add_parser("finetune", help="continue training a checkpoint on new data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output checkpoint path (required unless --dry-run)")
    p.add_argument("--resume-optimizer", action="store_true", help="continue from the saved Adam state")
    p.add_argument("--dry-run", action="store_true", help="print iteration accounting and exit")
    _add_training(p)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG/JPEG image or .wnt tensor")
    p.add_argument("--crop-box", type=_nonneg_int, nargs=4, metavar=("X", "Y", "W", "H"),
                   help="crop to this box instead of the checkpoint's fixed margins")
    return parser


def parse_args(argv=None):
    """Validate ``argv`` into a ``CommandPlan``; usage errors exit with status 2."""
    parser = build_parser()
    a = parser.parse_args(argv)
    seed = a.seed if getattr(a, "seed", None) is not None else _seed_default()
    plan = CommandPlan(a.subcommand, seed=seed, options={"quiet": a.quiet})
    try:
        if hasattr(a, "crop"):
            top, bottom, left, right = a.crop
            plan.preprocess_config = PreprocessConfig(top, bottom, left, right, a.size, a.normalize)
        if hasattr(a, "lr"):
            plan.train_config = TrainConfig(
                learning_rate=a.lr, batch_size=a.batch_size, epochs=a.epochs, dropout_keep=a.dropout_keep,
                seed=seed, eval_every=a.eval_every, precision=a.precision,
            )
        if hasattr(a, "filters"):
            plan.model_config = ModelConfig(
                input_shape=(3, a.size, a.size), conv_filters=tuple(a.filters), fc1_units=a.fc1,
                dropout_keep=a.dropout_keep,
            )
    except ValueError as exc:
        parser.error(str(exc))

    if a.subcommand == "preprocess":
        plan.paths = {"input": a.input, "output": a.output}
    elif a.subcommand == "train":
        plan.paths = {"data": a.data, "out": a.out, "eval_data": a.eval_data}
        plan.options["save_optimizer"] = not a.no_optimizer_state
        if a.eval_every and not a.eval_data:
            parser.error("--eval-every needs --eval-data")
    elif a.subcommand == "crossval":
        if a.folds < 2:
            parser.error(f"--folds must be >= 2, got {a.folds}")
        report_json = a.report_json or os.path.splitext(a.report)[0] + ".json"
        plan.paths = {"data": a.data, "report": a.report, "report_json": report_json}
        plan.options.update(folds=a.folds, jobs=a.jobs)
    elif a.subcommand == "evaluate":
        plan.paths = {"checkpoint": a.checkpoint, "data": a.data, "report": a.report}
    elif a.subcommand == "finetune":
        if not a.out and not a.dry_run:
            parser.error("finetune needs --out unless --dry-run is given")
        plan.paths = {"checkpoint": a.checkpoint, "data": a.data, "out": a.out}
        plan.options.update(resume_optimizer=a.resume_optimizer, dry_run=a.dry_run)
    elif a.subcommand == "predict":
        plan.paths = {"checkpoint": a.checkpoint, "image": a.image}
        plan.options["crop_box"] = tuple(a.crop_box) if a.crop_box else None
    return plan


# ---------------------------------------------------------------- commands


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _cmd_preprocess(plan):
    src, dst = plan.paths["input"], plan.paths["output"]
    if not os.path.isdir(src):
        raise FileNotFoundError(f"input directory {src} does not exist")
    if os.path.abspath(src) == os.path.abspath(dst):
        raise ValueError("output directory must differ from the input directory")
    count = 0
    for dirpath, dirnames, filenames in os.walk(src):
        dirnames.sort()
        for name in sorted(filenames):
            if not name.lower().endswith(IMAGE_EXTENSIONS):
                continue
            rel = os.path.relpath(os.path.join(dirpath, name), src)
            target = os.path.join(dst, os.path.splitext(rel)[0] + ".wnt")
            os.makedirs(os.path.dirname(target), exist_ok=True)
            x = preprocess_pipeline(load_image(os.path.join(dirpath, name)), plan.preprocess_config)
            checkpoint.save_tensor(target, x.astype(np.float32))
            count += 1
    log.info("preprocessed %d images into %s", count, dst)
    return 0


def _cmd_train(plan):
    cfg, mcfg, pcfg = plan.train_config, plan.model_config, plan.preprocess_config
    samples = SampleStore(load_manifest(plan.paths["data"]), pcfg, cfg.dtype)
    eval_samples = None
    if plan.paths.get("eval_data"):
        eval_samples = SampleStore(load_manifest(plan.paths["eval_data"]), pcfg, cfg.dtype)
    model = build_wnet(mcfg, make_rng(plan.seed, INIT_STREAM), cfg.dtype)
    log.info("training W-Net (%d parameters) on %d samples for %d epochs", model.num_parameters(), len(samples), cfg.epochs)
    result = train(model, samples, cfg, make_rng(plan.seed, TRAIN_STREAM), eval_samples=eval_samples)
    optimizer = result.optimizer if plan.options.get("save_optimizer", True) else None
    checkpoint.save(plan.paths["out"], model, pcfg, optimizer, epoch=cfg.epochs, master_seed=plan.seed)
    log.info("wrote %s", plan.paths["out"])
    return 0


def _cmd_crossval(plan):
    cfg, mcfg, pcfg = plan.train_config, plan.model_config, plan.preprocess_config
    samples = SampleStore(load_manifest(plan.paths["data"]), pcfg, cfg.dtype)
    report = cross_validate(samples, plan.options["folds"], cfg, mcfg, jobs=plan.options.get("jobs", 1))
    _write_text(plan.paths["report"], report.to_csv())
    _write_text(plan.paths["report_json"], report.to_json())
    log.info("macro accuracy averaged over classes: %.4f", report.grand_average)
    return 0


def _cmd_evaluate(plan):
    ckpt = checkpoint.load(plan.paths["checkpoint"])
    samples = SampleStore(load_manifest(plan.paths["data"]), ckpt.preprocess_config, ckpt.model.dtype)
    report = evaluate(ckpt.model, samples)
    _write_text(plan.paths["report"], json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("macro %.4f overall %.4f on %d samples", report.macro_accuracy, report.overall_accuracy, report.n)
    return 0


def _cmd_finetune(plan):
    cfg = plan.train_config
    manifest = load_manifest(plan.paths["data"])
    if plan.options.get("dry_run"):
        counts = iteration_counts(len(manifest), cfg.batch_size, cfg.epochs)
        counts["class_counts"] = dict(zip(manifest.class_names, manifest.class_counts()))
        print(json.dumps(counts, sort_keys=True))
        return 0
    source = checkpoint.load(plan.paths["checkpoint"])
    samples = SampleStore(manifest, source.preprocess_config, source.model.dtype)
    ckpt, _ = checkpoint.finetune(
        source, samples, cfg, make_rng(plan.seed, TRAIN_STREAM),
        num_classes=len(manifest.class_names), resume_optimizer=plan.options.get("resume_optimizer", False),
    )
    checkpoint.save(plan.paths["out"], ckpt.model, ckpt.preprocess_config, ckpt.optimizer, ckpt.epoch, ckpt.master_seed)
    log.info("wrote %s", plan.paths["out"])
    return 0


def _cmd_predict(plan):
    ckpt = checkpoint.load(plan.paths["checkpoint"])
    path = plan.paths["image"]
    if path.endswith(".wnt"):
        x = checkpoint.load_tensor(path)
    else:
        x = preprocess_pipeline(load_image(path), ckpt.preprocess_config, plan.options.get("crop_box"))
    classes, probs = ckpt.model.predict(x[None].astype(ckpt.model.dtype))
    names = CLASS_NAMES if ckpt.model.config.num_classes == len(CLASS_NAMES) else [str(i) for i in range(len(probs[0]))]
    print(json.dumps({
        "class": names[classes[0]],
        "index": classes[0],
        "probabilities": {n: float(p) for n, p in zip(names, probs[0])},
    }))
    return 0


COMMANDS = {
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "crossval": _cmd_crossval,
    "evaluate": _cmd_evaluate,
    "finetune": _cmd_finetune,
    "predict": _cmd_predict,
}


def run(plan):
    """Dispatch ``plan``; returns the process exit code."""
    try:
        return COMMANDS[plan.subcommand](plan)
    except Exception as exc:
        log.error("wnet %s: %s", plan.subcommand, exc)
        return 1


def main(argv=None):
    try:
        plan = parse_args(argv)
    except SystemExit as exc:
        if exc.code is None or isinstance(exc.code, int):
            return exc.code or 0
        print(exc.code, file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.ERROR if plan.options.get("quiet") else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    return run(plan)


if __name__ == "__main__":
    sys.exit(main())
