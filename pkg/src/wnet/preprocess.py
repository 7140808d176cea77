"""Crop, resize and normalise raw RGB microscope images.

Raw images are ``uint8`` arrays shaped ``[height, width, 3]`` in R, G, B
order. The pipeline output is a ``[3, size, size]`` float tensor.
"""

from dataclasses import asdict, dataclass

import numpy as np

NORMALIZE_SCHEMES = ("unit_scale", "per_image_standardize")
STD_FLOOR = 1e-6


@dataclass
class PreprocessConfig:
    crop_top: int = 80
    crop_bottom: int = 81
    crop_left: int = 80
    crop_right: int = 80
    target_size: int = 128
    normalize_scheme: str = "per_image_standardize"

    def __post_init__(self):
        for name in ("crop_top", "crop_bottom", "crop_left", "crop_right"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.target_size < 1:
            raise ValueError(f"target_size must be >= 1, got {self.target_size}")
        if self.normalize_scheme not in NORMALIZE_SCHEMES:
            raise ValueError(f"normalize_scheme must be one of {NORMALIZE_SCHEMES}, got {self.normalize_scheme!r}")

    @property
    def margins(self):
        return self.crop_top, self.crop_bottom, self.crop_left, self.crop_right

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def load_image(path):
    """Decode a PNG/JPEG file into an ``[h, w, 3]`` uint8 RGB array."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def crop(img, top, bottom, left, right):
    """Remove the given number of pixels from each side."""
    h, w = img.shape[:2]
    if min(top, bottom, left, right) < 0:
        raise ValueError("crop margins must be non-negative")
    if top + bottom >= h or left + right >= w:
        raise ValueError(f"crop margins ({top}, {bottom}, {left}, {right}) consume the whole {h}x{w} image")
    return img[top:h - bottom, left:w - right]


def crop_box(img, box):
    """Crop to an ``(x, y, w, h)`` box given in pixel coordinates."""
    x, y, bw, bh = (int(v) for v in box)
    h, w = img.shape[:2]
    if bw < 1 or bh < 1 or x < 0 or y < 0 or x + bw > w or y + bh > h:
        raise ValueError(f"crop box {box} does not fit inside a {h}x{w} image")
    return img[y:y + bh, x:x + bw]


def _axis_coords(in_size, out_size):
    # half-pixel centres: src = (dst + 0.5) * in/out - 0.5, clamped to the edge
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img, target):
    """Bilinear resize of an ``[h, w, c]`` image to ``[target, target, c]``.

    Returns float64 values (no requantisation), so a constant image maps to
    exactly the same constant and values stay within the input range.
    """
    if isinstance(target, int):
        out_h = out_w = target
    else:
        out_h, out_w = target
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    src = np.asarray(img, dtype=np.float64)
    if src.shape[0] < 1 or src.shape[1] < 1:
        raise ValueError("cannot resize an empty image")
    y0, y1, fy = _axis_coords(src.shape[0], out_h)
    x0, x1, fx = _axis_coords(src.shape[1], out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    # a + (b - a) * f keeps constant regions exact and stays inside [a, b]
    rows0, rows1 = src[y0], src[y1]
    top = rows0[:, x0] + (rows0[:, x1] - rows0[:, x0]) * fx
    bot = rows1[:, x0] + (rows1[:, x1] - rows1[:, x0]) * fx
    return top + (bot - top) * fy


def normalize(img, scheme="per_image_standardize"):
    """Scale an ``[h, w, 3]`` image with values in [0, 255] to a ``[3, h, w]`` tensor.

    ``unit_scale`` divides by 255. ``per_image_standardize`` additionally
    subtracts each channel's mean and divides by its (population) standard
    deviation, floored at 1e-6.
    """
    x = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
    if scheme == "unit_scale":
        return np.ascontiguousarray(x)
    if scheme == "per_image_standardize":
        mean = x.mean(axis=(1, 2), keepdims=True)
        std = x.std(axis=(1, 2), keepdims=True)
        return np.ascontiguousarray((x - mean) / np.maximum(std, STD_FLOOR))
    raise ValueError(f"unknown normalize scheme {scheme!r}")


def preprocess_pipeline(img, cfg=None, box=None):
    """Crop (fixed margins, or ``box`` when given), resize, normalise."""
    cfg = cfg or PreprocessConfig()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an [h, w, 3] RGB image, got shape {img.shape}")
    cropped = crop_box(img, box) if box is not None else crop(img, *cfg.margins)
    return normalize(resize_bilinear(cropped, cfg.target_size), cfg.normalize_scheme)
