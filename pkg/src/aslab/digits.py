"""Deterministic synthetic digit corpus.

Renders 28x28 grayscale digit images (white glyph on black, with random
size, offset, and rotation) and can write them out in IDX format, so
the rest of the pipeline consumes them exactly as it would a real digit
corpus. Useful where no corpus download is possible and for hermetic
tests.
"""

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import rng as rng_mod
from .data import write_idx_images, write_idx_labels

GLYPH_SIDE = 28


@lru_cache(maxsize=16)
def _font(size: int):
    return ImageFont.load_default(size=size)


def render_digit(digit: int, gen: np.random.Generator) -> np.ndarray:
    """One 28x28 uint8 digit image; glyph pixels are > 0, background is
    exactly 0 (so masks derive from non-zero pixels)."""
    if not 0 <= digit <= 9:
        raise ValueError(f"digit must be 0..9, got {digit}")
    size = int(gen.integers(17, 24))
    dx = float(gen.uniform(-2.0, 2.0))
    dy = float(gen.uniform(-2.0, 2.0))
    angle = float(gen.uniform(-14.0, 14.0))
    img = Image.new("L", (GLYPH_SIDE, GLYPH_SIDE), 0)
    draw = ImageDraw.Draw(img)
    draw.text(
        (GLYPH_SIDE / 2 + dx, GLYPH_SIDE / 2 + dy),
        str(digit),
        fill=255,
        font=_font(size),
        anchor="mm",
    )
    img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
    arr = np.asarray(img, dtype=np.uint8).copy()
    arr[arr < 8] = 0  # kill resampling shimmer so background stays exact 0
    return arr


def make_digit_corpus(n: int, seed: int):
    """Balanced labels (a seeded permutation of 0..9 repeated), one
    derived generator per image so the corpus is order-independent.

    Returns (images uint8 (n, 28, 28), labels int64 (n,)).
    """
    label_gen = rng_mod.derive_generator(seed, 0xD1617)
    labels = label_gen.permutation(np.arange(n, dtype=np.int64) % 10)
    images = np.empty((n, GLYPH_SIDE, GLYPH_SIDE), dtype=np.uint8)
    for i in range(n):
        g = rng_mod.derive_generator(seed, i + 1)
        images[i] = render_digit(int(labels[i]), g)
    return images, labels


def write_idx_corpus(dirpath, n_train: int, n_test: int, seed: int) -> dict[str, Path]:
    """Write a synthetic corpus as four IDX files (train/test images and
    labels) under ``dirpath``; returns their paths."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    train_images, train_labels = make_digit_corpus(n_train, seed)
    test_images, test_labels = make_digit_corpus(n_test, rng_mod.mix64(seed ^ 0x7E57))
    paths = {
        "train_images": dirpath / "train-images-idx3-ubyte",
        "train_labels": dirpath / "train-labels-idx1-ubyte",
        "test_images": dirpath / "t10k-images-idx3-ubyte",
        "test_labels": dirpath / "t10k-labels-idx1-ubyte",
    }
    write_idx_images(paths["train_images"], train_images)
    write_idx_labels(paths["train_labels"], train_labels)
    write_idx_images(paths["test_images"], test_images)
    write_idx_labels(paths["test_labels"], test_labels)
    return paths
