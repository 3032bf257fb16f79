#!/usr/bin/env python3
"""Build the bundled MNIST 10k subset (IDX format) from the `mnist` npm package.

The npm package (MIT licensed, https://www.npmjs.com/package/mnist) ships
10,000 real MNIST digits as per-class JSON arrays of pixel/255 values rounded
to three decimals. This script restores the u8 pixels, shuffles with a fixed
seed and writes an 8000/2000 train/test split as standard IDX files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist10k_from_npm.py package/src/digits crates/core/data/mnist10k
"""
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        pix = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(20190101).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = 8000
    os.makedirs(dst, exist_ok=True)
    for split, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        im, lb = images[sl], labels[sl]
        write_idx(os.path.join(dst, f"{split}-images-idx3-ubyte"), 0x803, (len(im), 28, 28), im)
        write_idx(os.path.join(dst, f"{split}-labels-idx1-ubyte"), 0x801, (len(lb),), lb)
        print(split, len(lb), np.bincount(lb, minlength=10))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
