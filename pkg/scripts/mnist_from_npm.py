"""Convert the digit JSON files shipped by the npm ``mnist`` package to IDX.

The npm package (``npm pack mnist``) carries 10,000 MNIST digits as
per-class JSON arrays of floats in [0, 1] rounded to three decimals.
Samples are interleaved across classes so any prefix is class-balanced.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py package/src/digits tests/data
"""
import json
import sys
from pathlib import Path

import numpy as np

from quietsr.dataio import write_idx

SIZE = 28


def load_classes(digits_dir):
    classes = []
    for label in range(10):
        raw = json.loads((Path(digits_dir) / f"{label}.json").read_text())["data"]
        arr = np.asarray(raw, dtype=np.float64).reshape(-1, SIZE, SIZE)
        classes.append(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8))
    return classes


def interleave(classes, start, count):
    out = []
    idx = start
    while len(out) < count:
        for c in classes:
            if len(out) < count:
                out.append(c[idx])
        idx += 1
    return np.stack(out)


def main(argv):
    digits_dir, out_dir = argv[1], Path(argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = load_classes(digits_dir)
    write_idx(out_dir / "mnist-train-sample-idx3-ubyte", interleave(classes, 0, 300))
    write_idx(out_dir / "mnist-test-sample-idx3-ubyte", interleave(classes, 500, 300))


if __name__ == "__main__":
    main(sys.argv)
