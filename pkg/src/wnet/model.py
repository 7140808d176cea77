"""The W-Net classifier: three conv blocks and two dense layers."""

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .init import xavier_init
from .losses import softmax, softmax_cross_entropy
from .tensor import ShapeError, argmax_last_axis

CLASS_NAMES = ("neutrophil", "eosinophil", "basophil", "lymphocyte", "monocyte")


class ModeError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    input_shape: tuple = (3, 128, 128)
    conv_filters: tuple = (16, 32, 64)
    kernel: int = 3
    conv_stride: int = 1
    pool_window: int = 2
    pool_stride: int = 2
    fc1_units: int = 1024
    num_classes: int = 5
    dropout_keep: float = 0.6
    xavier_variant: str = "uniform"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width) with positive dims, got {self.input_shape}")
        if not self.conv_filters or min(self.conv_filters) < 1:
            raise ValueError(f"conv_filters must be a nonempty list of positive ints, got {self.conv_filters}")
        for name in ("kernel", "conv_stride", "pool_window", "pool_stride", "fc1_units", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValueError(f"dropout_keep must lie in (0, 1], got {self.dropout_keep}")

    def feature_shape(self):
        """(channels, height, width) entering the flatten step."""
        _, h, w = self.input_shape
        for _ in self.conv_filters:
            pad = self.kernel - 1
            h = (h + pad - self.kernel) // self.conv_stride + 1
            w = (w + pad - self.kernel) // self.conv_stride + 1
            h = -(-h // self.pool_stride)
            w = -(-w // self.pool_stride)
        return self.conv_filters[-1], h, w

    def flatten_width(self):
        c, h, w = self.feature_shape()
        return c * h * w

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class WNetModel:
    """Ordered layer stack with explicit train/infer mode.

    Layer order: conv1, pool1, drop1, conv2, pool2, drop2, conv3, pool3,
    drop3, flatten, fc1, relu, drop4, fc2. Each conv layer applies ReLU before
    pooling.
    """

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.layers = {}
        in_ch = config.input_shape[0]
        for i, filters in enumerate(config.conv_filters, start=1):
            self.layers[f"conv{i}"] = L.Conv2D(in_ch, filters, config.kernel, config.conv_stride, "same", self.dtype)
            self.layers[f"conv{i}_relu"] = L.ReLU()
            self.layers[f"pool{i}"] = L.MaxPool2D(config.pool_window, config.pool_stride, "same")
            self.layers[f"drop{i}"] = L.Dropout(config.dropout_keep)
            in_ch = filters
        n_conv = len(config.conv_filters)
        self.layers["flatten"] = L.Flatten()
        self.layers["fc1"] = L.Dense(config.flatten_width(), config.fc1_units, self.dtype)
        self.layers["relu"] = L.ReLU()
        self.layers[f"drop{n_conv + 1}"] = L.Dropout(config.dropout_keep)
        self.layers["fc2"] = L.Dense(config.fc1_units, config.num_classes, self.dtype)
        self.mode = "train"
        self.trace = {}
        self._forward_done = False

    # ---------------------------------------------------------------- params

    def parameters(self):
        """Name -> array for every trainable tensor, in fixed layer order."""
        out = {}
        for lname, layer in self.layers.items():
            for pname, p in layer.params.items():
                out[f"{lname}.{pname}"] = p
        return out

    def gradients(self):
        out = {}
        for lname, layer in self.layers.items():
            for pname in layer.params:
                if pname not in layer.grads:
                    raise L.LayerStateError(f"no gradient for {lname}.{pname}; run backward first")
                out[f"{lname}.{pname}"] = layer.grads[pname]
        return out

    def set_parameters(self, params):
        own = self.parameters()
        if set(own) != set(params):
            raise KeyError(f"parameter names differ: missing {sorted(set(own) - set(params))}, "
                           f"unexpected {sorted(set(params) - set(own))}")
        for name, value in params.items():
            if own[name].shape != value.shape:
                raise ShapeError(f"{name}: expected shape {own[name].shape}, got {value.shape}")
            own[name][...] = value

    def parameter_counts(self):
        """Trainable parameter count per parameterised layer."""
        return {
            name: sum(p.size for p in layer.params.values())
            for name, layer in self.layers.items()
            if layer.params
        }

    def num_parameters(self):
        return sum(self.parameter_counts().values())

    # ------------------------------------------------------------------ mode

    def set_mode(self, mode):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.mode = mode
        for layer in self.layers.values():
            if isinstance(layer, L.Dropout):
                layer.mode = mode

    def set_rng(self, rng):
        """Use ``rng`` for dropout masks."""
        for layer in self.layers.values():
            if isinstance(layer, L.Dropout):
                layer.rng = rng

    # ------------------------------------------------------------ computation

    def forward(self, x):
        expected = tuple(self.config.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input [n, {', '.join(map(str, expected))}], got {list(x.shape)}")
        x = np.asarray(x, dtype=self.dtype)
        self.trace = {}
        for name, layer in self.layers.items():
            x = layer.forward(x)
            self.trace[name] = x.shape
        self._forward_done = True
        return x

    def stage_shapes(self):
        """Output shapes after each pooling stage, flatten, fc1 and fc2."""
        n_conv = len(self.config.conv_filters)
        names = [f"pool{i}" for i in range(1, n_conv + 1)] + ["flatten", "fc1", "fc2"]
        return [tuple(self.trace[k]) for k in names]

    def backward(self, grad_logits):
        if not self._forward_done:
            raise L.LayerStateError("backward called without a matching forward")
        g = np.asarray(grad_logits, dtype=self.dtype)
        for layer in reversed(list(self.layers.values())):
            g = layer.backward(g)
        self._forward_done = False
        return self.gradients()

    def loss_and_grads(self, x, labels):
        """Forward, mean softmax cross-entropy, backward."""
        logits = self.forward(x)
        loss, grad_logits = softmax_cross_entropy(logits, labels)
        grads = self.backward(grad_logits)
        return loss, grads

    def predict(self, x):
        """Return ``(classes, probabilities)``; the model must be in infer mode."""
        if self.mode != "infer":
            raise ModeError("predict requires infer mode; call set_mode('infer') first")
        logits = self.forward(x)
        self._forward_done = False
        probs = softmax(logits.astype(np.float64))
        return argmax_last_axis(logits), probs


def build_wnet(config=None, rng=None, dtype=np.float32):
    """Instantiate W-Net with Xavier weights and zero biases.

    Weights are drawn layer by layer in network order from ``rng``.
    """
    config = config or ModelConfig()
    if rng is None:
        raise ValueError("build_wnet needs an rng for weight initialisation")
    model = WNetModel(config, dtype)
    for layer in model.layers.values():
        if "weight" in layer.params:
            w = layer.params["weight"]
            w[...] = xavier_init(w.shape, layer.fan_in, layer.fan_out, rng, config.xavier_variant, model.dtype)
    return model
