#!/usr/bin/env python3
"""Build MNIST-layout IDX files from the digits bundled in the npm `mnist` package.

The package ships 10000 MNIST digits as JSON (784 floats in [0,1] per digit,
rounded to three decimals). Pixels are re-quantized to bytes, shuffled with a
fixed seed and split 8000/2000 into the four standard IDX files.

usage: mnist_from_npm.py <package-dir> <out-dir>
       (package-dir is the unpacked tarball from `npm pack mnist`)
"""
import json
import os
import struct
import sys

import numpy as np


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        count = len(flat) // 784
        arr = np.asarray(flat, dtype=np.float64).reshape(count, 784)
        images.append(np.clip(np.rint(arr * 255.0), 0, 255))
        labels.append(np.full(count, digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(20230601).permutation(len(labels))
    images, labels = images[order], labels[order]
    os.makedirs(out, exist_ok=True)
    split = 8000
    write_images(os.path.join(out, "train-images-idx3-ubyte"), images[:split])
    write_labels(os.path.join(out, "train-labels-idx1-ubyte"), labels[:split])
    write_images(os.path.join(out, "t10k-images-idx3-ubyte"), images[split:])
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), labels[split:])
    print(f"wrote {split} train / {len(labels) - split} test samples to {out}")


if __name__ == "__main__":
    main()
