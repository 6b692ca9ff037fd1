"""
Reading and writing IDX files
=============================

Write a tiny image dataset in IDX format, inspect the header bytes, and
load it back.
"""

import tempfile
from pathlib import Path

import numpy as np

from laurel.data import Dataset, TruncatedError, load_idx, write_idx

rng = np.random.default_rng(0)
pixels = rng.integers(0, 256, (3, 4 * 4))
data = Dataset(pixels / 255.0, [2, 0, 1], num_classes=3)

with tempfile.TemporaryDirectory() as tmp:
    img, lab = Path(tmp) / "images.idx", Path(tmp) / "labels.idx"
    write_idx(data, img, lab, rows=4, cols=4)

    # magic 0x00000803, then n, rows, cols, all big-endian uint32
    print("image header:", img.read_bytes()[:16].hex(" ", 4))
    print("label header:", lab.read_bytes()[:8].hex(" ", 4))

    back = load_idx(img, lab)
    print("features identical:", np.array_equal(back.features, data.features))
    print("labels:", back.labels.tolist())

    # a cut-off file names the length it expected
    img.write_bytes(img.read_bytes()[:-5])
    try:
        load_idx(img, lab)
    except TruncatedError as exc:
        print("error:", exc)
