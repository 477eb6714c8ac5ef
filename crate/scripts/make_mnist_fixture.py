#!/usr/bin/env python3
"""Build a small IDX-format MNIST fixture from the `mnist` npm package.

The npm package (https://github.com/cazala/mnist, MIT) ships ~10k MNIST digits
grouped by class as JSON arrays of pixel/255 values rounded to 3 decimals. This
script converts PER_CLASS digits of every class into the four standard IDX
files, interleaved in a seeded order so class membership is mixed as in the
official files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_fixture.py package/src/digits data/mnist-fixture
"""
import json
import random
import struct
import sys
from pathlib import Path

PER_CLASS = 40
SEED = 20240101


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(data) // 784
        assert count >= 2 * PER_CLASS
        samples = [
            [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            for i in range(2 * PER_CLASS)
        ]
        train += [(s, digit) for s in samples[:PER_CLASS]]
        test += [(s, digit) for s in samples[PER_CLASS:]]
    rng = random.Random(SEED)
    rng.shuffle(train)
    rng.shuffle(test)
    for prefix, split in (("train", train), ("t10k", test)):
        write_images(dst / f"{prefix}-images-idx3-ubyte", [s for s, _ in split])
        write_labels(dst / f"{prefix}-labels-idx1-ubyte", [d for _, d in split])


if __name__ == "__main__":
    main()
