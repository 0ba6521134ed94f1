#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

Usage: mnist_from_npm.py PACKAGE_DIR OUT_DIR [LIMIT]

PACKAGE_DIR is the unpacked npm tarball (`npm pack mnist && tar xzf mnist-*.tgz`
gives `package/`). Digits are interleaved by class with a fixed seed so any
prefix is roughly class-balanced. Pixels in the package are stored as v/255
rounded to three decimals; they are mapped back to bytes with round(v*255).
"""
import json
import random
import struct
import sys
from pathlib import Path


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    limit = int(sys.argv[3]) if len(sys.argv) > 3 else None
    items = []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        n = len(raw) // 784
        for i in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            items.append((px, digit))
    random.Random(20140101).shuffle(items)
    if limit is not None:
        items = items[:limit]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(items), 28, 28))
        for px, _ in items:
            f.write(px)
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(items)))
        f.write(bytes(label for _, label in items))
    print(f"wrote {len(items)} digits to {out}")


if __name__ == "__main__":
    main()
