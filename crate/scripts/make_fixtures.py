"""Regenerate the 64x64 natural-image fixtures used by the test suites.

Crops come from scikit-image's bundled sample photographs.
"""
import os
import sys

import numpy as np
from PIL import Image
import skimage.data as data

SOURCES = ["astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
           "hubble_deep_field", "retina", "cat"]
COUNT = 24
SIZE = 64

def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(20201018)
    photos = [getattr(data, name)()[..., :3] for name in SOURCES]
    for i in range(COUNT):
        img = photos[i % len(photos)]
        h, w = img.shape[:2]
        side = int(rng.integers(min(h, w) // 3, min(h, w) // 2 + 1))
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        crop = Image.fromarray(img[y:y + side, x:x + side])
        crop = crop.resize((SIZE, SIZE), Image.BICUBIC)
        crop.save(os.path.join(out_dir, f"img{i:02d}.png"))

if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/natural")
