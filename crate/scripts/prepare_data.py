#!/usr/bin/env python3
"""Export the datasets used by the experiment suite into plain files.

  data/natural/*.pgm   8-bit grayscale natural photographs (scikit-image and
                       scikit-learn sample images)
  data/mnist/*-ubyte   IDX files built from the 5000-digit MNIST subset that
                       ships with mlxtend (400 train / 100 test per class)

Usage: python3 scripts/prepare_data.py [out_dir]
"""
import gzip
import os
import struct
import sys

import numpy as np

NATURAL = [
    "astronaut.png", "brick.png", "camera.png", "chelsea.png", "coffee.png",
    "grass.png", "gravel.png", "moon.png",
    "motorcycle_left.png", "motorcycle_right.png", "rocket.jpg",
]


def to_gray(img):
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    img = img.astype(np.float64)
    lo, hi = img.min(), img.max()
    return np.round(255.0 * (img - lo) / max(hi - lo, 1e-12)).astype(np.uint8)


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def write_idx_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def natural(out):
    import skimage.io
    from skimage import data as skdata
    from sklearn.datasets import load_sample_images

    d = os.path.join(out, "natural")
    os.makedirs(d, exist_ok=True)
    root = os.path.dirname(skdata.__file__)
    for name in NATURAL:
        p = os.path.join(root, name)
        if not os.path.exists(p):
            continue
        write_pgm(os.path.join(d, os.path.splitext(name)[0] + ".pgm"), to_gray(skimage.io.imread(p)))
    for i, img in enumerate(load_sample_images().images):
        write_pgm(os.path.join(d, "sklearn_%d.pgm" % i), to_gray(img))
    print("natural images ->", d, len(os.listdir(d)))


def mnist(out):
    import mlxtend

    src = os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")
    raw = np.loadtxt(gzip.open(src, "rt"), delimiter=",", dtype=np.int64)
    x, y = raw[:, :784], raw[:, 784]
    # the file is sorted by class: split 400/100 per class, then shuffle
    rng = np.random.default_rng(0)
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        train.extend(idx[:400])
        test.extend(idx[400:])
    train, test = rng.permutation(train), rng.permutation(test)
    d = os.path.join(out, "mnist")
    os.makedirs(d, exist_ok=True)
    write_idx_images(os.path.join(d, "train-images-idx3-ubyte"), x[train])
    write_idx_labels(os.path.join(d, "train-labels-idx1-ubyte"), y[train])
    write_idx_images(os.path.join(d, "t10k-images-idx3-ubyte"), x[test])
    write_idx_labels(os.path.join(d, "t10k-labels-idx1-ubyte"), y[test])
    print("mnist ->", d, np.bincount(y))


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "data")
    natural(out)
    mnist(out)
