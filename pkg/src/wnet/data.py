"""Dataset manifests, stratified folds and batch iteration.

A manifest is a UTF-8 CSV with header ``path,label,crop_x,crop_y,crop_w,crop_h``.
``label`` is a class name or its index; the crop columns are optional and,
when filled, give the per-image ``(x, y, w, h)`` box used instead of the
fixed margins (LISC-style data). Relative paths resolve against the
manifest's directory.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .model import CLASS_NAMES

CROP_COLUMNS = ("crop_x", "crop_y", "crop_w", "crop_h")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    crop_box: tuple = None


@dataclass
class DatasetManifest:
    records: list
    root: str = "."
    class_names: tuple = CLASS_NAMES

    def __len__(self):
        return len(self.records)

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()

    def resolve(self, record):
        return record.path if os.path.isabs(record.path) else os.path.join(self.root, record.path)

    def subset(self, indices):
        return DatasetManifest([self.records[i] for i in indices], self.root, self.class_names)


def parse_label(text, class_names=CLASS_NAMES):
    text = text.strip()
    lowered = [c.lower() for c in class_names]
    if text.lower() in lowered:
        return lowered.index(text.lower())
    if text.isdigit() and int(text) < len(class_names):
        return int(text)
    raise ValueError(f"unknown class {text!r}; expected one of {', '.join(class_names)} or an index 0-{len(class_names) - 1}")


def load_manifest(path, class_names=CLASS_NAMES):
    """Parse a manifest CSV; errors carry the offending line number."""
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not rows:
        raise ManifestError(f"{path}: empty manifest (missing header)")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["path", "label"] or any(h not in CROP_COLUMNS for h in header[2:]):
        raise ManifestError(f"{path}:1: header must be path,label[,crop_x,crop_y,crop_w,crop_h], got {','.join(header)}")
    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) > len(header):
            raise ManifestError(f"{path}:{lineno}: expected at most {len(header)} columns, got {len(row)}")
        values = dict(zip(header, (cell.strip() for cell in row)))
        p = values.get("path", "")
        if not p:
            raise ManifestError(f"{path}:{lineno}: empty path")
        if p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {p!r}")
        try:
            label = parse_label(values.get("label", ""), class_names)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        crop_cells = [values.get(c, "") for c in CROP_COLUMNS]
        box = None
        if any(crop_cells):
            if not all(crop_cells):
                raise ManifestError(f"{path}:{lineno}: crop box needs all of {', '.join(CROP_COLUMNS)}")
            try:
                box = tuple(int(c) for c in crop_cells)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: crop box values must be integers, got {crop_cells}") from None
            if box[2] < 1 or box[3] < 1 or box[0] < 0 or box[1] < 0:
                raise ManifestError(f"{path}:{lineno}: invalid crop box {box}")
        seen.add(p)
        records.append(Record(p, label, box))
    return DatasetManifest(records, os.path.dirname(os.path.abspath(path)), tuple(class_names))


def write_manifest(path, records, class_names=CLASS_NAMES):
    with_crop = any(r.crop_box is not None for r in records)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "label", *CROP_COLUMNS] if with_crop else ["path", "label"])
        for r in records:
            row = [r.path, class_names[r.label]]
            if with_crop:
                row += list(r.crop_box) if r.crop_box else ["", "", "", ""]
            w.writerow(row)


# ---------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray
    labels: np.ndarray
    seed: int = None

    def test_indices(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold):
        return np.flatnonzero(self.assignments != fold)

    def fold_sizes(self):
        return np.bincount(self.assignments, minlength=self.k).tolist()

    def class_fold_counts(self, num_classes=len(CLASS_NAMES)):
        """``[k, num_classes]`` count of each class in each fold."""
        counts = np.zeros((self.k, num_classes), dtype=np.int64)
        np.add.at(counts, (self.assignments, self.labels), 1)
        return counts


def stratified_kfold(labels, k, rng, seed=None):
    """Shuffle each class with ``rng`` and deal its members round-robin.

    The dealing position carries over from one class to the next, so both
    per-class and total fold sizes differ by at most one.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    assignments = np.full(len(labels), -1, dtype=np.int64)
    offset = 0
    for c in range(int(labels.max()) + 1 if len(labels) else 0):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        assignments[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    return FoldPlan(k, assignments, labels, seed)


# ---------------------------------------------------------------- batching


def batches(items, batch_size, shuffle=False, rng=None):
    """Split ``items`` into consecutive groups; the final partial group is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    items = list(items)
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        items = [items[i] for i in rng.permutation(len(items))]
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]


def iteration_counts(n_samples, batch_size, epochs):
    """Optimizer-step bookkeeping for a run.

    The engine keeps the final partial batch, so it takes
    ``ceil(n / batch) * epochs`` steps; the nominal count ``n * epochs / batch``
    is reported alongside.
    """
    per_epoch = math.ceil(n_samples / batch_size) if n_samples else 0
    nominal = n_samples * epochs / batch_size
    partial = n_samples % batch_size
    out = {
        "samples": n_samples,
        "batch_size": batch_size,
        "epochs": epochs,
        "batches_per_epoch": per_epoch,
        "full_batches_per_epoch": n_samples // batch_size,
        "partial_batch_size": partial,
        "engine_iterations": per_epoch * epochs,
        "nominal_iterations": int(nominal) if float(nominal).is_integer() else nominal,
    }
    if partial:
        out["note"] = (
            f"{n_samples} samples do not divide into batches of {batch_size}; the final batch of "
            f"{partial} is kept, giving {per_epoch} steps per epoch and {per_epoch * epochs} in total "
            f"versus the nominal {n_samples}x{epochs}/{batch_size} = {out['nominal_iterations']}"
        )
    else:
        out["note"] = "batches divide evenly; engine and nominal counts agree"
    return out


# ---------------------------------------------------------------- samples


class SampleStore:
    """Preprocessed input tensors for the records of a manifest.

    Records pointing at ``.wnt`` tensor files are taken as already
    preprocessed; anything else is decoded as an image and run through the
    preprocessing pipeline. Loaded tensors are cached.
    """

    def __init__(self, manifest, preprocess_config=None, dtype=np.float32, cache=True):
        from .preprocess import PreprocessConfig

        self.manifest = manifest
        self.preprocess_config = preprocess_config or PreprocessConfig()
        self.dtype = np.dtype(dtype)
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.manifest)

    @property
    def labels(self):
        return self.manifest.labels

    def load(self, i):
        from .checkpoint import load_tensor
        from .preprocess import load_image, preprocess_pipeline

        if self.cache is not None and i in self.cache:
            return self.cache[i]
        rec = self.manifest.records[i]
        path = self.manifest.resolve(rec)
        if path.endswith(".wnt"):
            x = load_tensor(path)
        else:
            x = preprocess_pipeline(load_image(path), self.preprocess_config, rec.crop_box)
        x = x.astype(self.dtype)
        if self.cache is not None:
            self.cache[i] = x
        return x

    def __getitem__(self, indices):
        return np.stack([self.load(int(i)) for i in indices])


@dataclass
class ArraySamples:
    """In-memory inputs ``[n, c, h, w]`` with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, indices):
        return self.inputs[np.asarray(indices, dtype=np.int64)]


class SubsetSamples:
    """Index view onto another sample collection."""

    def __init__(self, base, indices):
        self.base = base
        self.indices = np.asarray(indices, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    @property
    def labels(self):
        return np.asarray(self.base.labels)[self.indices]

    def __getitem__(self, indices):
        return self.base[self.indices[np.asarray(indices, dtype=np.int64)]]
