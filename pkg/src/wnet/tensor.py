"""Dense array helpers shared by every other module.

Tensors are plain C-contiguous ``numpy.ndarray`` objects in row-major
order; 4-D activations use NCHW layout. ``float32`` is the training default
and ``float64`` the reference precision for gradient checks.
"""

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def resolve_dtype(precision):
    """Map ``"single"``/``"double"`` (or a numpy dtype) to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def tensor_create(shape, fill=0.0, dtype=np.float64):
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    return np.full(shape, fill, dtype=dtype)


def matmul(a, b):
    """Rank-2 matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def argmax_last_axis(t):
    """Row-wise argmax of an ``[n, c]`` array; ties go to the lowest index."""
    t = np.asarray(t)
    if t.ndim != 2:
        raise ShapeError(f"argmax_last_axis expects rank-2 input, got shape {t.shape}")
    if t.shape[1] == 0:
        raise ShapeError("argmax over an empty last axis")
    # np.argmax returns the first occurrence of the maximum
    return [int(i) for i in np.argmax(t, axis=1)]


def reshape(t, shape):
    t = np.ascontiguousarray(t)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {shape}")
    return t.reshape(shape)
