"""Training loop, evaluation metrics and the k-fold cross-validation driver."""

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import SubsetSamples, batches, stratified_kfold
from .model import CLASS_NAMES, ModelConfig, build_wnet
from .optim import Adam
from .rng import CV_STREAM, FOLD_STREAM, INIT_STREAM, TRAIN_STREAM, derive_seed, make_rng
from .tensor import resolve_dtype

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 5
    epochs: int = 500
    dropout_keep: float = 0.6
    seed: int = 0
    eval_every: int = 0
    precision: str = "single"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValueError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")
        resolve_dtype(self.precision)

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    def adam_hyper(self):
        return dict(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


@dataclass
class TrainResult:
    model: object
    optimizer: Adam
    history: list
    eval_history: list = field(default_factory=list)


def param_digest(model):
    """SHA-256 over every parameter's bytes, in layer order."""
    h = hashlib.sha256()
    for name, p in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def train(model, samples, cfg, rng, optimizer=None, eval_samples=None, on_epoch=None):
    """Minibatch Adam on mean softmax cross-entropy.

    ``samples`` is any collection with ``len()``, a ``labels`` array and
    integer-array indexing that returns ``[b, c, h, w]`` inputs. ``rng``
    drives both the per-epoch shuffle and the dropout masks. Returns a
    ``TrainResult`` whose ``history`` holds the mean batch loss of each epoch.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("cannot train on an empty set")
    labels = np.asarray(samples.labels, dtype=np.int64)
    if optimizer is None:
        optimizer = Adam(model.parameters(), **cfg.adam_hyper())
    model.set_mode("train")
    model.set_rng(rng)
    params = model.parameters()
    history, eval_history = [], []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in batches(range(n), cfg.batch_size, shuffle=True, rng=rng):
            loss, grads = model.loss_and_grads(samples[idx], labels[idx])
            optimizer.step(params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.6f", epoch, cfg.epochs, history[-1])
        if eval_samples is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            model.set_mode("infer")
            report = evaluate(model, eval_samples, cfg.batch_size)
            model.set_mode("train")
            eval_history.append({"epoch": epoch, **report.summary()})
            log.info("epoch %d held-out macro accuracy %.4f", epoch, report.macro_accuracy)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return TrainResult(model, optimizer, history, eval_history)


# ---------------------------------------------------------------- evaluation


def _json_float(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


@dataclass
class EvalReport:
    """Metrics derived from a confusion matrix (rows true, columns predicted)."""

    confusion: np.ndarray
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes=len(CLASS_NAMES), class_names=CLASS_NAMES):
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(cm, tuple(class_names))

    @property
    def n(self):
        return int(self.confusion.sum())

    @property
    def class_support(self):
        return self.confusion.sum(axis=1)

    @property
    def per_class_accuracy(self):
        """Per-class recall; NaN for classes with no samples."""
        rows = self.class_support
        diag = np.diag(self.confusion).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, diag / np.maximum(rows, 1), np.nan)

    @property
    def macro_accuracy(self):
        acc = self.per_class_accuracy
        valid = acc[~np.isnan(acc)]
        return float(valid.mean()) if valid.size else float("nan")

    @property
    def overall_accuracy(self):
        return float(np.trace(self.confusion) / self.n) if self.n else float("nan")

    def summary(self):
        return {
            "n": self.n,
            "macro_accuracy": _json_float(self.macro_accuracy),
            "overall_accuracy": _json_float(self.overall_accuracy),
        }

    def to_dict(self):
        return {
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": [_json_float(a) for a in self.per_class_accuracy],
            **self.summary(),
        }


def evaluate(model, samples, batch_size=32):
    """Confusion matrix and metrics of ``model`` (infer mode) over ``samples``."""
    n = len(samples)
    if n == 0:
        raise ValueError("cannot evaluate on an empty set")
    preds = []
    for idx in batches(range(n), batch_size):
        classes, _ = model.predict(samples[idx])
        preds.extend(classes)
    k = model.config.num_classes
    names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(i) for i in range(k))
    return EvalReport.from_predictions(samples.labels, preds, k, names)


# ---------------------------------------------------------------- cross-validation


class FoldError(RuntimeError):
    def __init__(self, fold, cause):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.fold, self.cause)


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    history: list
    train_size: int
    test_size: int
    init_digest: str
    final_digest: str


@dataclass
class CvReport:
    folds: list
    seed: int = 0

    @property
    def k(self):
        return len(self.folds)

    @property
    def class_names(self):
        return self.folds[0].report.class_names

    @property
    def grid(self):
        """``[k, classes]`` per-fold per-class accuracy (NaN where a fold lacks the class)."""
        return np.array([f.report.per_class_accuracy for f in self.folds])

    @property
    def class_averages(self):
        g = self.grid
        with np.errstate(invalid="ignore"):
            return np.array([np.nanmean(col) if np.any(~np.isnan(col)) else np.nan for col in g.T])

    @property
    def grand_average(self):
        avg = self.class_averages
        return float(np.nanmean(avg)) if np.any(~np.isnan(avg)) else float("nan")

    @property
    def fold_macro(self):
        return np.array([f.report.macro_accuracy for f in self.folds])

    @property
    def fold_overall(self):
        return np.array([f.report.overall_accuracy for f in self.folds])

    def to_csv(self):
        """Table layout: one row per fold, then the average row."""
        def fmt(x):
            return "" if x is None or math.isnan(x) else f"{x:.6f}"

        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["fold", *self.class_names, "macro", "overall", "n"])
        for f in self.folds:
            r = f.report
            w.writerow([f"Fold-{f.fold}", *map(fmt, r.per_class_accuracy), fmt(r.macro_accuracy),
                        fmt(r.overall_accuracy), r.n])
        w.writerow(["Average", *map(fmt, self.class_averages), fmt(self.grand_average),
                    fmt(float(np.nanmean(self.fold_overall))), sum(f.report.n for f in self.folds)])
        return out.getvalue()

    def to_dict(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "class_names": list(self.class_names),
            "folds": [
                {
                    "fold": f.fold,
                    "train_size": f.train_size,
                    "test_size": f.test_size,
                    "init_digest": f.init_digest,
                    "final_digest": f.final_digest,
                    "final_loss": f.history[-1] if f.history else None,
                    **f.report.to_dict(),
                }
                for f in self.folds
            ],
            "class_averages": [_json_float(a) for a in self.class_averages],
            "grand_average": _json_float(self.grand_average),
            "mean_overall_accuracy": _json_float(float(np.nanmean(self.fold_overall))),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def fold_seed(master_seed, fold):
    return derive_seed(master_seed, CV_STREAM, fold)


def run_fold(samples, plan, fold, cfg, model_config, master_seed):
    """Train a freshly initialised model on every fold but ``fold``, test on ``fold``."""
    try:
        seed = fold_seed(master_seed, fold)
        train_idx, test_idx = plan.train_indices(fold), plan.test_indices(fold)
        model = build_wnet(model_config, make_rng(seed, INIT_STREAM), cfg.dtype)
        init_digest = param_digest(model)
        result = train(model, SubsetSamples(samples, train_idx), cfg, make_rng(seed, TRAIN_STREAM))
        model.set_mode("infer")
        report = evaluate(model, SubsetSamples(samples, test_idx), cfg.batch_size)
        log.info("fold %d: macro %.4f overall %.4f", fold, report.macro_accuracy, report.overall_accuracy)
        return FoldResult(fold, report, result.history, len(train_idx), len(test_idx), init_digest, param_digest(model))
    except FoldError:
        raise
    except Exception as exc:
        raise FoldError(fold, exc) from exc


def _run_fold_star(args):
    return run_fold(*args)


def cross_validate(samples, k, cfg, model_config=None, jobs=1):
    """Stratified k-fold cross-validation driven entirely by ``cfg.seed``.

    Each fold trains a fresh model whose init and training streams derive
    from (seed, fold), so running folds in parallel (``jobs > 1``) gives the
    same per-fold results as running them in sequence.
    """
    model_config = model_config or ModelConfig(dropout_keep=cfg.dropout_keep)
    plan = stratified_kfold(samples.labels, k, make_rng(cfg.seed, FOLD_STREAM), seed=cfg.seed)
    tasks = [(samples, plan, f, cfg, model_config, cfg.seed) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_star, tasks))
    else:
        folds = [run_fold(*t) for t in tasks]
    return CvReport(folds, cfg.seed)
