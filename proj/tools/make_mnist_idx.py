#!/usr/bin/env python3
"""Convert the digit samples bundled with the `mnist` npm package into
gzip-compressed IDX files laid out like the original MNIST distribution.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_idx.py package/src/digits data/mnist

Samples are shuffled with a fixed seed and split into a training set and a
t10k-style test set.
"""
import argparse
import gzip
import json
import pathlib
import random
import struct

SIDE = 28


def load_digit(path):
    flat = json.loads(path.read_text())["data"]
    n = len(flat) // (SIDE * SIDE)
    out = []
    for i in range(n):
        px = flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
        out.append(bytes(max(0, min(255, round(v * 255))) for v in px))
    return out


def write_idx(path, images, labels):
    with gzip.GzipFile(path / "images.tmp", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with gzip.GzipFile(path / "labels.tmp", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--test-fraction", type=float, default=0.15)
    ap.add_argument("--seed", type=int, default=2025)
    args = ap.parse_args()

    samples = []
    for d in range(10):
        samples += [(img, d) for img in load_digit(args.digits_dir / f"{d}.json")]
    random.Random(args.seed).shuffle(samples)
    n_test = int(len(samples) * args.test_fraction)
    splits = {"t10k": samples[:n_test], "train": samples[n_test:]}

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for prefix, rows in splits.items():
        write_idx(args.out_dir, [r[0] for r in rows], [r[1] for r in rows])
        (args.out_dir / "images.tmp").rename(args.out_dir / f"{prefix}-images-idx3-ubyte.gz")
        (args.out_dir / "labels.tmp").rename(args.out_dir / f"{prefix}-labels-idx1-ubyte.gz")
        print(f"{prefix}: {len(rows)} samples")


if __name__ == "__main__":
    main()
