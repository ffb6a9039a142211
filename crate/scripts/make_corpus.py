"""Regenerate the small grayscale corpus under data/ from scikit-image's
bundled CC0 / public-domain sample images.

    python3 scripts/make_corpus.py
"""
import os

import numpy as np
from PIL import Image
from skimage import data

SOURCES = [
    "camera", "astronaut", "coins", "text", "chelsea", "coffee",
    "rocket", "brick", "grass", "gravel", "cell", "clock",
]
TRAIN_TILE = 128
TEST_TILE = 80
ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")


def gray(img):
    img = np.asarray(img)
    if img.ndim == 3:
        rgb = img[..., :3].astype(np.float64)
        img = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        img = np.round(img)
    return np.clip(img, 0, 255).astype(np.uint8)


def main():
    rng = np.random.default_rng(20190101)
    train_dir = os.path.join(ROOT, "train")
    test_dir = os.path.join(ROOT, "test")
    os.makedirs(train_dir, exist_ok=True)
    os.makedirs(test_dir, exist_ok=True)
    train, test = [], []
    for i, name in enumerate(SOURCES):
        img = gray(getattr(data, name)())
        h, w = img.shape
        # left part of each source feeds training, right part feeds testing
        split = (w * 2) // 3
        n_train = 2 if i < 8 else 1
        for k in range(n_train):
            y = int(rng.integers(0, h - TRAIN_TILE + 1))
            x = int(rng.integers(0, split - TRAIN_TILE + 1))
            tile = img[y:y + TRAIN_TILE, x:x + TRAIN_TILE]
            fname = f"{name}_{k}.png"
            Image.fromarray(tile, mode="L").save(os.path.join(train_dir, fname))
            train.append(os.path.join("train", fname))
        if i < 10:
            y = int(rng.integers(0, h - TEST_TILE + 1))
            x = int(rng.integers(split, w - TEST_TILE + 1))
            tile = img[y:y + TEST_TILE, x:x + TEST_TILE]
            fname = f"{name}.png"
            Image.fromarray(tile, mode="L").save(os.path.join(test_dir, fname))
            test.append(os.path.join("test", fname))
    with open(os.path.join(ROOT, "train.txt"), "w") as f:
        f.write("# training tiles, 128x128 8-bit grayscale\n")
        f.write("\n".join(train) + "\n")
    with open(os.path.join(ROOT, "test.txt"), "w") as f:
        f.write("# held-out test tiles, 80x80 8-bit grayscale\n")
        f.write("\n".join(test) + "\n")


if __name__ == "__main__":
    main()
