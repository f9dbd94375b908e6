#!/usr/bin/env python3
"""Write gzipped IDX files for the first N MNIST training digits and the full test set.

Usage:
    npm pack mnist-data && tar xzf mnist-data-*.tgz
    python3 scripts/mnist_subset.py package/data data/mnist 10000

The source directory must hold the four official uncompressed IDX files.
"""
import gzip
import hashlib
import shutil
import struct
import sys
from pathlib import Path

TRAIN_IMAGES_MD5 = "6bbc9ace898e44ae57da46a324031adb"


def write_gz(path: Path, payload: bytes) -> None:
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(payload)


def main(src: Path, dst: Path, n: int) -> None:
    images = (src / "train-images-idx3-ubyte").read_bytes()
    labels = (src / "train-labels-idx1-ubyte").read_bytes()
    if hashlib.md5(images).hexdigest() != TRAIN_IMAGES_MD5:
        sys.exit("train-images-idx3-ubyte is not the official MNIST file")
    magic, count, rows, cols = struct.unpack(">IIII", images[:16])
    assert magic == 0x803 and n <= count
    dst.mkdir(parents=True, exist_ok=True)
    write_gz(
        dst / f"train{n // 1000}k-images-idx3-ubyte.gz",
        struct.pack(">IIII", magic, n, rows, cols) + images[16 : 16 + n * rows * cols],
    )
    write_gz(dst / f"train{n // 1000}k-labels-idx1-ubyte.gz", struct.pack(">II", 0x801, n) + labels[8 : 8 + n])
    for name in ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]:
        with open(src / name, "rb") as f, gzip.GzipFile(dst / f"{name}.gz", "wb", mtime=0) as g:
            shutil.copyfileobj(f, g)


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]), int(sys.argv[3]) if len(sys.argv) > 3 else 10000)
