"""Forward and backward passes for the layers W-Net is built from.

Each layer comes in two flavours: pure functions (``conv2d_forward``,
``conv2d_backward``, ...) that take every operand explicitly, and small
stateful classes that cache what the backward pass needs. The classes own
their parameters in ``params`` and write gradients into ``grads`` under the
same keys.

All 4-D tensors are NCHW.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


class LayerStateError(RuntimeError):
    """Backward was called without a matching forward."""


# --------------------------------------------------------------------------
# convolution


def _conv_padding(kernel, padding_mode):
    if padding_mode == "same":
        return (kernel - 1) // 2, kernel // 2
    if padding_mode == "valid":
        return 0, 0
    raise ValueError(f"unknown padding mode {padding_mode!r}")


def _im2col(x, kh, kw, stride, pad):
    """Return (cols, out_h, out_w); cols is [n*out_h*out_w, c*kh*kw]."""
    n, c = x.shape[:2]
    (top, bottom), (left, right) = pad
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = win.shape[2], win.shape[3]
    # [n, c, oh, ow, kh, kw] -> [n, oh, ow, c, kh, kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    return np.ascontiguousarray(cols), out_h, out_w


def conv2d_forward(x, weights, bias, stride=1, padding_mode="same", return_cols=False):
    """Cross-correlate ``x`` [n, c, h, w] with ``weights`` [o, c, kh, kw].

    ``out[n, o, i, j] = bias[o] + sum_{c, di, dj} xpad[n, c, i*s + di, j*s + dj] * W[o, c, di, dj]``
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    o, c, kh, kw = weights.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]} channels, kernel expects {c}")
    pad = (_conv_padding(kh, padding_mode), _conv_padding(kw, padding_mode))
    cols, out_h, out_w = _im2col(x, kh, kw, stride, pad)
    out = cols @ weights.reshape(o, -1).T
    out += bias
    out = out.reshape(x.shape[0], out_h, out_w, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, weights, grad_out, stride=1, padding_mode="same", cols=None):
    """Gradients of ``sum(grad_out * conv2d_forward(x, W, b))``.

    Returns ``(grad_x, grad_w, grad_b)``.
    """
    o, c, kh, kw = weights.shape
    n, _, h, w = x.shape
    (top, bottom), (left, right) = pad = (_conv_padding(kh, padding_mode), _conv_padding(kw, padding_mode))
    if cols is None:
        cols, out_h, out_w = _im2col(x, kh, kw, stride, pad)
    else:
        out_h = (h + top + bottom - kh) // stride + 1
        out_w = (w + left + right - kw) // stride + 1
    if grad_out.shape != (n, o, out_h, out_w):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output {(n, o, out_h, out_w)}")

    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (g.T @ cols).reshape(weights.shape)
    grad_b = g.sum(axis=0)

    gcols = (g @ weights.reshape(o, -1)).reshape(n, out_h, out_w, c, kh, kw)
    gpad = np.zeros((n, c, h + top + bottom, w + left + right), dtype=grad_out.dtype)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for di in range(kh):
        for dj in range(kw):
            gpad[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += gcols[..., di, dj].transpose(0, 3, 1, 2)
    grad_x = gpad[:, :, top:top + h, left:left + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


class Conv2D:
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding_mode="same", dtype=np.float32):
        _conv_padding(kernel, padding_mode)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding_mode = padding_mode
        self.params = {
            "weight": np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }
        self.grads = {}
        self._x = None
        self._cols = None

    @property
    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    @property
    def fan_out(self):
        return self.out_ch * self.kernel * self.kernel

    def forward(self, x):
        out, self._cols = conv2d_forward(
            x, self.params["weight"], self.params["bias"], self.stride, self.padding_mode, return_cols=True
        )
        self._x = x
        return out

    def backward(self, grad_out):
        if self._x is None:
            raise LayerStateError("Conv2D.backward called before forward")
        gx, gw, gb = conv2d_backward(
            self._x, self.params["weight"], grad_out, self.stride, self.padding_mode, cols=self._cols
        )
        self.grads = {"weight": gw, "bias": gb}
        self._x = self._cols = None
        return gx


# --------------------------------------------------------------------------
# max pooling


def maxpool_forward(x, window=2, stride=2, padding_mode="same"):
    """Non-overlapping max pooling.

    Returns ``(out, argmax)`` where ``argmax`` holds, per output element, the
    flat index into ``x`` of the winning input. With ``padding_mode="same"``
    odd spatial sizes are padded at the bottom/right with cells that never
    win. Ties go to the lowest flat index.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects NCHW input, got shape {x.shape}")
    if stride != window:
        raise ValueError("only non-overlapping pooling (stride == window) is supported")
    n, c, h, w = x.shape
    p = window
    if padding_mode == "same":
        oh, ow = -(-h // p), -(-w // p)
    elif padding_mode == "valid":
        oh, ow = h // p, w // p
    else:
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    ph, pw = oh * p, ow * p
    if ph > h or pw > w:
        xp = np.full((n, c, ph, pw), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x
    else:
        xp = x[:, :, :ph, :pw]
    win = xp.reshape(n, c, oh, p, ow, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, p * p)
    # window cells are enumerated row-major, so first-occurrence argmax is the lowest flat index
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]

    rows = np.arange(oh)[:, None] * p + local // p
    cols = np.arange(ow)[None, :] * p + local % p
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    argmax = plane + rows * w + cols
    return np.ascontiguousarray(out), argmax


def maxpool_backward(grad_out, argmax, x_shape):
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape {argmax.shape}")
    grad_x = np.zeros(int(np.prod(x_shape)), dtype=grad_out.dtype)
    # windows never overlap, so each input receives at most one contribution
    grad_x[argmax.ravel()] = grad_out.ravel()
    return grad_x.reshape(x_shape)


class MaxPool2D:
    def __init__(self, window=2, stride=2, padding_mode="same"):
        self.window = window
        self.stride = stride
        self.padding_mode = padding_mode
        self.params = {}
        self.grads = {}
        self.cached_argmax = None
        self._x_shape = None

    def forward(self, x):
        out, self.cached_argmax = maxpool_forward(x, self.window, self.stride, self.padding_mode)
        self._x_shape = x.shape
        return out

    def backward(self, grad_out):
        if self.cached_argmax is None:
            raise LayerStateError("MaxPool2D.backward called before forward")
        gx = maxpool_backward(grad_out, self.cached_argmax, self._x_shape)
        self.cached_argmax = None
        return gx


# --------------------------------------------------------------------------
# activations, dropout, reshaping


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient 0 at exactly 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


class ReLU:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._x = None

    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, grad_out):
        if self._x is None:
            raise LayerStateError("ReLU.backward called before forward")
        gx = relu_backward(self._x, grad_out)
        self._x = None
        return gx


def dropout_mask(shape, keep_prob, rng, dtype=np.float64):
    """Inverted-dropout mask: ``1/keep_prob`` with probability ``keep_prob``, else 0."""
    dtype = np.dtype(dtype)
    return (rng.random(shape) < keep_prob).astype(dtype) / dtype.type(keep_prob)


class Dropout:
    """Inverted dropout; the identity in ``"infer"`` mode.

    ``keep_prob`` is the retention probability.
    """

    def __init__(self, keep_prob=0.6, rng=None):
        if not (0.0 < keep_prob <= 1.0):
            raise ValueError(f"dropout keep_prob must lie in (0, 1], got {keep_prob}")
        self.keep_prob = float(keep_prob)
        self.mode = "train"
        self.rng = rng
        self.params = {}
        self.grads = {}
        self.cached_mask = None

    def forward(self, x):
        if self.mode == "infer" or self.keep_prob == 1.0:
            self.cached_mask = 1.0
            return x
        if self.rng is None:
            raise LayerStateError("Dropout in train mode needs a seeded rng")
        self.cached_mask = dropout_mask(x.shape, self.keep_prob, self.rng, x.dtype)
        return x * self.cached_mask

    def backward(self, grad_out):
        if self.cached_mask is None:
            raise LayerStateError("Dropout.backward called before forward")
        mask = self.cached_mask
        self.cached_mask = None
        if isinstance(mask, float):
            return grad_out
        return grad_out * mask


def flatten(x):
    if x.ndim != 4:
        raise ShapeError(f"flatten expects rank-4 input, got shape {x.shape}")
    return np.ascontiguousarray(x).reshape(x.shape[0], -1)


class Flatten:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return flatten(x)

    def backward(self, grad_out):
        if self._shape is None:
            raise LayerStateError("Flatten.backward called before forward")
        gx = grad_out.reshape(self._shape)
        self._shape = None
        return gx


# --------------------------------------------------------------------------
# fully connected


def dense_forward(x, weights, bias):
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    return x @ weights + bias


def dense_backward(x, weights, grad_out):
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match dense output {(x.shape[0], weights.shape[1])}")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


class Dense:
    def __init__(self, in_units, out_units, dtype=np.float32):
        self.in_units = in_units
        self.out_units = out_units
        self.params = {
            "weight": np.zeros((in_units, out_units), dtype=dtype),
            "bias": np.zeros(out_units, dtype=dtype),
        }
        self.grads = {}
        self._x = None

    @property
    def fan_in(self):
        return self.in_units

    @property
    def fan_out(self):
        return self.out_units

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad_out):
        if self._x is None:
            raise LayerStateError("Dense.backward called before forward")
        gx, gw, gb = dense_backward(self._x, self.params["weight"], grad_out)
        self.grads = {"weight": gw, "bias": gb}
        self._x = None
        return gx
