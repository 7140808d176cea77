"""Independent reference implementations used only by the tests.

Nothing here calls into the code under test; every oracle is written with
plain loops or textbook formulas.
"""

import math

import numpy as np


def numerical_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` with respect to array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    """max |a - n| scaled by the largest gradient magnitude involved."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def conv_nested(x, w, b, pad):
    n_, c_, h, wd = x.shape
    o_, _, kh, kw = w.shape
    xp = np.zeros((n_, c_, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n_, o_, oh, ow))
    for n in range(n_):
        for o in range(o_):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(c_):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[n, c, i + di, j + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def maxpool_nested(x, p=2):
    """2x2/stride-2 max with out-of-range cells skipped; returns (out, flat argmax)."""
    n_, c_, h, w = x.shape
    oh, ow = math.ceil(h / p), math.ceil(w / p)
    out = np.zeros((n_, c_, oh, ow))
    idx = np.zeros((n_, c_, oh, ow), dtype=np.int64)
    for n in range(n_):
        for c in range(c_):
            for i in range(oh):
                for j in range(ow):
                    best, best_idx = None, None
                    for di in range(p):
                        for dj in range(p):
                            r, s = i * p + di, j * p + dj
                            if r >= h or s >= w:
                                continue
                            flat = ((n * c_ + c) * h + r) * w + s
                            if best is None or x[n, c, r, s] > best:
                                best, best_idx = x[n, c, r, s], flat
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = best_idx
    return out, idx


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def naive_softmax(row):
    e = [math.exp(v) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        total -= math.log(naive_softmax(row)[y])
    return total / len(labels)


def adam_scalar_trace(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on a scalar, written out step by step in plain floats."""
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def bilinear_half_pixel(img, out_h, out_w):
    """Per-pixel bilinear sample with half-pixel centres and edge clamping."""
    h, w = len(img), len(img[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bot * fy
    return out


def tally_confusion(y_true, y_pred, k=5):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return cm
