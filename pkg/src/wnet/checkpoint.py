"""WNC1 checkpoint container and WNT1 tensor files.

Both formats are little-endian throughout and documented in
``docs/checkpoint_format.md``. A checkpoint holds the model and preprocessing
configs (canonical JSON), training provenance, every parameter tensor in
layer order and, optionally, the Adam state for each parameter.
"""

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, WNetModel
from .optim import Adam, AdamState
from .preprocess import PreprocessConfig

MAGIC = b"WNC1"
VERSION = 1
TENSOR_MAGIC = b"WNT1"
TENSOR_VERSION = 1

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class NotACheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """Truncated payload, dim/byte mismatch, or inconsistent contents."""


@dataclass
class Checkpoint:
    model: WNetModel
    preprocess_config: PreprocessConfig
    epoch: int = 0
    master_seed: int = 0
    optimizer: Adam = None


# ---------------------------------------------------------------- encoding


def _canonical_json(d):
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_blob(out, data):
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def write_tensor(out, name, array):
    array = np.asarray(array)
    dt = array.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise CheckpointError(f"tensor {name!r}: unsupported dtype {array.dtype}")
    _write_blob(out, name.encode("utf-8"))
    out.write(struct.pack("<BI", DTYPE_CODES[dt], array.ndim))
    out.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    out.write(np.ascontiguousarray(array, dtype=dt).tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise IntegrityError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def blob(self, what):
        (n,) = self.unpack("<I", what)
        return self.take(n, what)

    def tensor(self):
        try:
            name = self.blob("tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IntegrityError(f"{self.path}: tensor name is not valid UTF-8") from exc
        code, rank = self.unpack("<BI", f"header of tensor {name!r}")
        if code not in CODE_DTYPES:
            raise IntegrityError(f"{self.path}: tensor {name!r} has unknown dtype code {code}")
        dims = self.unpack(f"<{rank}Q", f"dims of tensor {name!r}")
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        if self.pos + nbytes > len(self.data):
            raise IntegrityError(
                f"{self.path}: tensor {name!r} declares {nbytes} payload bytes for dims {list(dims)} "
                f"but only {len(self.data) - self.pos} remain (truncated)"
            )
        payload = self.take(nbytes, f"payload of tensor {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        return name, arr.astype(dtype.newbyteorder("="), copy=True)

    def done(self):
        if self.pos != len(self.data):
            raise IntegrityError(f"{self.path}: {len(self.data) - self.pos} unexpected trailing bytes")


def _read_file(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc


def _atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- checkpoint


def encode(model, preprocess_config=None, optimizer=None, epoch=0, master_seed=0):
    preprocess_config = preprocess_config or PreprocessConfig()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    _write_blob(out, _canonical_json(model.config.to_dict()))
    _write_blob(out, _canonical_json(preprocess_config.to_dict()))
    out.write(struct.pack("<QQ", int(epoch), int(master_seed)))
    params = model.parameters()
    out.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        write_tensor(out, name, p)
    if optimizer is None:
        out.write(struct.pack("<B", 0))
    else:
        h = optimizer.hyper
        out.write(struct.pack("<B", 1))
        out.write(struct.pack("<4d", h["learning_rate"], h["beta1"], h["beta2"], h["epsilon"]))
        out.write(struct.pack("<I", len(optimizer.states)))
        for name in params:
            st = optimizer.states[name]
            out.write(struct.pack("<Q", st.t))
            write_tensor(out, name + ".m", st.m)
            write_tensor(out, name + ".v", st.v)
    return out.getvalue()


def save(path, model, preprocess_config=None, optimizer=None, epoch=0, master_seed=0):
    """Write a WNC1 checkpoint atomically (temp file + rename)."""
    _atomic_write(path, encode(model, preprocess_config, optimizer, epoch, master_seed))


def decode(data, path="<bytes>"):
    r = _Reader(data, path)
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic {bytes(data[:4])!r})")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    try:
        mcfg = ModelConfig.from_dict(json.loads(r.blob("model config")))
        pcfg = PreprocessConfig.from_dict(json.loads(r.blob("preprocess config")))
    except (ValueError, TypeError) as exc:
        raise IntegrityError(f"{path}: malformed embedded config: {exc}") from exc
    epoch, master_seed = r.unpack("<QQ", "provenance counters")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        name, arr = r.tensor()
        if name in tensors:
            raise IntegrityError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = arr

    dtypes = {a.dtype for a in tensors.values()}
    if len(dtypes) != 1:
        raise IntegrityError(f"{path}: mixed parameter dtypes {sorted(map(str, dtypes))}")
    model = WNetModel(mcfg, dtypes.pop())
    expected = model.parameters()
    if list(tensors) != list(expected):
        raise IntegrityError(f"{path}: parameter tensors {list(tensors)} do not match the model layout {list(expected)}")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise IntegrityError(f"{path}: tensor {name!r} has shape {arr.shape}, model expects {expected[name].shape}")
    model.set_parameters(tensors)

    optimizer = None
    (has_opt,) = r.unpack("<B", "optimizer flag")
    if has_opt:
        lr, b1, b2, eps = r.unpack("<4d", "optimizer hyperparameters")
        (n_states,) = r.unpack("<I", "optimizer state count")
        if n_states != len(expected):
            raise IntegrityError(f"{path}: {n_states} optimizer states for {len(expected)} parameters")
        hyper = dict(learning_rate=lr, beta1=b1, beta2=b2, epsilon=eps)
        states = {}
        for name in expected:
            (t,) = r.unpack("<Q", f"step counter of {name!r}")
            mname, m = r.tensor()
            vname, v = r.tensor()
            if (mname, vname) != (name + ".m", name + ".v") or m.shape != expected[name].shape or v.shape != m.shape:
                raise IntegrityError(f"{path}: optimizer state for {name!r} is inconsistent")
            states[name] = AdamState(m, v, t, **hyper)
        optimizer = Adam.from_states(states, **hyper)
    r.done()
    return Checkpoint(model, pcfg, epoch, master_seed, optimizer)


def load(path):
    """Read a WNC1 checkpoint. The model comes back in infer mode."""
    ckpt = decode(_read_file(path), os.fspath(path))
    ckpt.model.set_mode("infer")
    return ckpt


# ---------------------------------------------------------------- tensor files


def save_tensor(path, array, name="image"):
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<I", TENSOR_VERSION))
    write_tensor(out, name, array)
    _atomic_write(path, out.getvalue())


def load_tensor(path):
    data = _read_file(path)
    if data[:4] != TENSOR_MAGIC:
        raise NotACheckpointError(f"{path}: not a tensor file (bad magic {bytes(data[:4])!r})")
    r = _Reader(data, os.fspath(path))
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != TENSOR_VERSION:
        raise UnsupportedVersionError(f"{path}: tensor file version {version} is not supported")
    _, arr = r.tensor()
    r.done()
    return arr


# ---------------------------------------------------------------- fine-tuning


class IncompatibleCheckpointError(CheckpointError):
    pass


def finetune(source, samples, cfg, rng, num_classes=None, resume_optimizer=False):
    """Continue training a saved model (path or loaded ``Checkpoint``) on new data.

    The optimizer starts fresh unless ``resume_optimizer`` is set and the
    checkpoint carries Adam state. Returns ``(checkpoint, train_result)``;
    the checkpoint's ``epoch`` is advanced by ``cfg.epochs``.
    """
    from .harness import train

    ckpt = source if isinstance(source, Checkpoint) else load(source)
    model = ckpt.model
    mc = model.config
    if num_classes is not None and num_classes != mc.num_classes:
        raise IncompatibleCheckpointError(
            f"checkpoint predicts {mc.num_classes} classes but the new data has {num_classes}"
        )
    labels = np.asarray(samples.labels)
    if len(labels) and labels.max() >= mc.num_classes:
        raise IncompatibleCheckpointError(f"label {labels.max()} is outside the checkpoint's {mc.num_classes} classes")
    if len(samples):
        shape = tuple(samples[[0]].shape[1:])
        if shape != mc.input_shape:
            raise IncompatibleCheckpointError(f"new data has input shape {shape}, checkpoint expects {mc.input_shape}")
    for layer in model.layers.values():
        if hasattr(layer, "keep_prob"):
            layer.keep_prob = cfg.dropout_keep
    mc.dropout_keep = cfg.dropout_keep

    optimizer = None
    if resume_optimizer:
        if ckpt.optimizer is None:
            raise IncompatibleCheckpointError("checkpoint carries no optimizer state to resume")
        optimizer = ckpt.optimizer
        for st in optimizer.states.values():
            st.learning_rate = cfg.learning_rate
        optimizer.hyper["learning_rate"] = cfg.learning_rate
    result = train(model, samples, cfg, rng, optimizer=optimizer)
    model.set_mode("infer")
    ckpt.epoch += cfg.epochs
    ckpt.optimizer = result.optimizer
    return ckpt, result
