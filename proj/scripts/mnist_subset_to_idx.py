#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

The package stores ~1000 real MNIST digits per class as flat arrays of
28x28 pixel intensities in [0, 1] rounded to three decimals. This script
rounds them back to bytes and writes a stratified train/test split in the
standard gzipped IDX container.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist-subset
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

SIDE = 28


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-fraction", type=float, default=0.8)
    args = ap.parse_args()

    train, test = [], []
    for digit in range(10):
        raw = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        cut = round(count * args.train_fraction)
        for i in range(count):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            img = bytes(min(255, max(0, round(v * 255))) for v in px)
            (train if i < cut else test).append((img, digit))

    # interleave classes so consecutive records are not sorted by label
    def interleave(records):
        by_label = [[r for r in records if r[1] == d] for d in range(10)]
        out = []
        while any(by_label):
            for bucket in by_label:
                if bucket:
                    out.append(bucket.pop(0))
        return out

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, records in (("train", interleave(train)), ("t10k", interleave(test))):
        n = len(records)
        write_idx(args.out_dir / f"{name}-images-idx3-ubyte.gz", 0x803, (n, SIDE, SIDE),
                  b"".join(r[0] for r in records))
        write_idx(args.out_dir / f"{name}-labels-idx1-ubyte.gz", 0x801, (n,),
                  bytes(r[1] for r in records))
        print(f"{name}: {n} samples")


if __name__ == "__main__":
    main()
