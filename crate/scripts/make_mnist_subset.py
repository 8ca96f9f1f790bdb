#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the digit JSON files shipped
with the `mnist` npm package (github.com/cazala/mnist).

usage: make_mnist_subset.py <package/src/digits dir> <out images> <out labels> [per_digit]

Pixels in the JSON files are intensities in [0, 1]; they are mapped back to
bytes with round(255 * v). Samples are interleaved with a fixed permutation.
"""
import json
import random
import struct
import sys
from pathlib import Path


def main() -> None:
    digits_dir = Path(sys.argv[1])
    out_images, out_labels = Path(sys.argv[2]), Path(sys.argv[3])
    per_digit = int(sys.argv[4]) if len(sys.argv) > 4 else 100

    samples = []
    for d in range(10):
        raw = json.loads((digits_dir / f"{d}.json").read_text())["data"]
        count = len(raw) // 784
        if count < per_digit:
            raise SystemExit(f"digit {d}: only {count} samples")
        for k in range(per_digit):
            px = raw[k * 784:(k + 1) * 784]
            samples.append((d, bytes(min(255, max(0, round(255 * v))) for v in px)))

    random.Random(20190601).shuffle(samples)

    with out_images.open("wb") as f:
        f.write(struct.pack(">IIII", 2051, len(samples), 28, 28))
        for _, px in samples:
            f.write(px)
    with out_labels.open("wb") as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(d for d, _ in samples))


if __name__ == "__main__":
    main()
