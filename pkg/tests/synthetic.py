"""Class-separable synthetic microscope images."""

import numpy as np

from wnet.data import ArraySamples, Record, write_manifest
from wnet.preprocess import PreprocessConfig, preprocess_pipeline

# one RGB colour and one blob position per class
COLOURS = np.array([[220, 40, 40], [40, 200, 40], [40, 40, 220], [200, 200, 40], [200, 40, 200]])
CENTRES = [(130, 130), (130, 230), (230, 130), (230, 230), (180, 180)]


def raw_image(label, rng, height=361, width=360):
    """361x360 RGB image: noisy grey background plus a class-coloured disk."""
    img = rng.normal(150, 12, size=(height, width, 3))
    yy, xx = np.mgrid[:height, :width]
    cy, cx = CENTRES[label]
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 < 35**2
    img[disk] = COLOURS[label] + rng.normal(0, 12, size=(int(disk.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def raw_dataset(per_class, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(5), per_class)
    return [raw_image(int(y), rng) for y in labels], labels


def tensor_dataset(per_class, seed=0, cfg=None, dtype=np.float32):
    images, labels = raw_dataset(per_class, seed)
    cfg = cfg or PreprocessConfig()
    x = np.stack([preprocess_pipeline(im, cfg) for im in images]).astype(dtype)
    return ArraySamples(x, labels)


def write_png_dataset(directory, per_class, seed=0):
    """Write PNGs plus a manifest; returns the manifest path."""
    from PIL import Image

    images, labels = raw_dataset(per_class, seed)
    records = []
    for i, (im, y) in enumerate(zip(images, labels)):
        name = f"img_{i:03d}.png"
        Image.fromarray(im).save(directory / name)
        records.append(Record(name, int(y)))
    path = directory / "manifest.csv"
    write_manifest(path, records)
    return path
