#!/usr/bin/env python3
"""Regenerates tests/data from scikit-image's bundled sample images.

train/  10 grayscale images (<= 256 px on the long side) used as the offline
        denoiser training corpus.
bench/  5 RGB 144x144 crops used as ground truth by the benchmark and the
        acceptance suite.

Sources and terms are listed in tests/data/SOURCES.txt.
"""

import os
import sys

import numpy as np
from PIL import Image
import skimage

DATA = os.path.join(os.path.dirname(skimage.__file__), "data")
OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "tests", "data")

TRAIN = ["camera", "coins", "moon", "brick", "grass", "gravel", "page", "text", "clock_motion", "cell"]
# (name, downscale factor, crop center as fraction of the downscaled image)
BENCH = [
    ("astronaut.png", 2, (0.30, 0.45)),
    ("chelsea.png", 2, (0.55, 0.45)),
    ("coffee.png", 2, (0.50, 0.50)),
    ("rocket.jpg", 2, (0.45, 0.50)),
    ("ihc.png", 2, (0.50, 0.50)),
]
CROP = 144


def resize(img, factor):
    w, h = img.size
    return img.resize((max(1, round(w / factor)), max(1, round(h / factor))), Image.Resampling.BICUBIC, reducing_gap=None)


def main():
    os.makedirs(os.path.join(OUT, "train"), exist_ok=True)
    os.makedirs(os.path.join(OUT, "bench"), exist_ok=True)
    for i, name in enumerate(TRAIN):
        img = Image.open(os.path.join(DATA, name + ".png")).convert("L")
        factor = max(img.size) / 256.0
        if factor > 1.0:
            img = resize(img, factor)
        img.save(os.path.join(OUT, "train", f"{i:02d}_{name}.png"), optimize=False)
    for i, (name, factor, (cy, cx)) in enumerate(BENCH):
        img = Image.open(os.path.join(DATA, name)).convert("RGB")
        img = resize(img, factor)
        w, h = img.size
        x0 = int(np.clip(cx * w - CROP / 2, 0, w - CROP))
        y0 = int(np.clip(cy * h - CROP / 2, 0, h - CROP))
        img.crop((x0, y0, x0 + CROP, y0 + CROP)).save(
            os.path.join(OUT, "bench", f"{i:02d}_{os.path.splitext(name)[0]}.png"), optimize=False)
    return 0


if __name__ == "__main__":
    sys.exit(main())
