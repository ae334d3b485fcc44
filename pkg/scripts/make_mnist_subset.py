"""Write the 5000-image MNIST subset shipped with mlxtend as gzipped IDX files.

Usage::

    python3 scripts/make_mnist_subset.py path/to/mlxtend-*.whl data/

The wheel (or an extracted ``mnist_5k.csv.gz``) is read directly; rows are
784 pixel values followed by the label.
"""

import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src):
    src = Path(src)
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as zf:
            raw = zf.read(MEMBER)
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode("ascii")
    data = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)
    return data[:, :784].astype(np.uint8), data[:, 784].astype(np.uint8)


def write_idx(images, labels, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    # gzip mtime fixed so the output is reproducible
    with open(out_dir / "images-idx3-ubyte.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(struct.pack(">IIII", 2051, n, 28, 28))
            fh.write(images.tobytes())
    with open(out_dir / "labels-idx1-ubyte.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(struct.pack(">II", 2049, n))
            fh.write(labels.tobytes())


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    imgs, labs = read_rows(sys.argv[1])
    write_idx(imgs, labs, sys.argv[2])
    print(f"wrote {len(labs)} images; label counts {np.bincount(labs).tolist()}")
