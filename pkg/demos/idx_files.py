"""
Reading MNIST IDX files
=======================

Writes a tiny IDX pair, reads it back, and builds split tasks from it.
Pass the four MNIST paths (train images, train labels, test images, test
labels; ``.gz`` is fine) to build the real five-task split stream instead.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from saddle_cl.tasks import load_mnist, make_split_tasks, parse_idx, write_idx_images, write_idx_labels

blob = write_idx_images(np.array([[[0, 255], [128, 64]]], dtype=np.uint8))
print("header bytes:", blob[:16].hex(" "), "\npixels:", parse_idx(blob))

pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
if len(sys.argv) == 5:
    train = load_mnist(sys.argv[1], sys.argv[2])
    test = load_mnist(sys.argv[3], sys.argv[4])
else:
    rng = np.random.default_rng(0)
    tmp = Path(tempfile.mkdtemp())
    (tmp / "img").write_bytes(write_idx_images(rng.integers(0, 256, (200, 28, 28), dtype=np.uint8)))
    (tmp / "lbl").write_bytes(write_idx_labels(np.arange(200) % 10))
    train = test = load_mnist(tmp / "img", tmp / "lbl")

for scenario in ("ITL", "IDL", "ICL"):
    stream = make_split_tasks(train, pairs, scenario, test=test)
    print(scenario, "tasks:", len(stream), "output units:", stream.output_dim,
          "train sizes:", [len(t.train) for t in stream.tasks])
