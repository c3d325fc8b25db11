"""Convert the digits bundled in the npm ``mnist`` package into IDX files.

The npm package (``npm pack mnist``) ships 10,000 MNIST digits as
``src/digits/<label>.json`` with pixel values scaled to [0, 1] and rounded to
three decimals.  This script rescales them to bytes and writes a seeded
8000/2000 train/test split in the standard gzipped IDX layout, so the regular
IDX loader can read it.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, *images.shape))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n-test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for label in range(10):
        raw = np.asarray(json.loads((args.digits_dir / f"{label}.json").read_text())["data"])
        pix = np.rint(raw * 255.0).clip(0, 255).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), label))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = len(labels) - args.n_test

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out_dir / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx_labels(args.out_dir / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx_images(args.out_dir / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_idx_labels(args.out_dir / "t10k-labels-idx1-ubyte.gz", labels[n_train:])
    print(f"wrote {n_train} train / {args.n_test} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
