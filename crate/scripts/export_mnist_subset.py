#!/usr/bin/env python3
"""Export a balanced MNIST subset to IDX files.

Source: the digit JSON files shipped in the `mnist` npm package
(`npm pack mnist`, then unpack). Each `src/digits/<d>.json` holds a flat
array of 784-pixel images scaled to [0, 1] with three decimals.

Usage: export_mnist_subset.py <package/src/digits> <out_dir> [per_class]

Writes train-images.idx, train-labels.idx, test-images.idx and
test-labels.idx. For every digit the first `per_class` images go to the
train split and the next `per_class` to the test split.
"""
import json
import os
import struct
import sys


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, round(p * 255))) for p in img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = sys.argv[1], sys.argv[2]
    per_class = int(sys.argv[3]) if len(sys.argv) > 3 else 100
    splits = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        images = [flat[i * 784:(i + 1) * 784] for i in range(len(flat) // 784)]
        for name, chunk in (("train", images[:per_class]),
                            ("test", images[per_class:2 * per_class])):
            splits[name][0].extend(chunk)
            splits[name][1].extend([digit] * len(chunk))
    os.makedirs(out, exist_ok=True)
    for name, (images, labels) in splits.items():
        write_images(os.path.join(out, f"{name}-images.idx"), images)
        write_labels(os.path.join(out, f"{name}-labels.idx"), labels)


if __name__ == "__main__":
    main()
