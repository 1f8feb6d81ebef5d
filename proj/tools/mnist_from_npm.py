#!/usr/bin/env python3
"""Rebuild IDX files from the `mnist` npm package (10k digits, 28x28).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data
"""
import argparse
import gzip
import json
import pathlib
import random
import struct


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits", type=pathlib.Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--seed", type=int, default=2018)
    args = ap.parse_args()

    items = []
    for label in range(10):
        flat = json.loads((args.digits / f"{label}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            items.append((label, bytes(round(v * 255) for v in flat[i:i + 784])))
    random.Random(args.seed).shuffle(items)

    args.out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(args.out / "mnist-desk-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(items), 28, 28))
        for _, px in items:
            f.write(px)
    with gzip.GzipFile(args.out / "mnist-desk-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(items)))
        f.write(bytes(label for label, _ in items))
    print(f"wrote {len(items)} images to {args.out}")


if __name__ == "__main__":
    main()
