"""Weight initialisation."""

import numpy as np


def xavier_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, fan_in, fan_out, rng, variant="uniform", dtype=np.float32):
    """Glorot/Xavier initialisation.

    ``"uniform"`` draws from U[-L, L] with ``L = sqrt(6 / (fan_in + fan_out))``;
    ``"normal"`` draws from N(0, 2 / (fan_in + fan_out)).
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    if variant == "uniform":
        bound = xavier_bound(fan_in, fan_out)
        values = rng.uniform(-bound, bound, size=tuple(shape))
    elif variant == "normal":
        values = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=tuple(shape))
    else:
        raise ValueError(f"unknown xavier variant {variant!r}")
    return values.astype(dtype)
