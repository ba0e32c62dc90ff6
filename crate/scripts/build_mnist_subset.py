"""Build the bundled MNIST subset (IDX, gzip) from the `mnist` npm package.

The npm package (MIT licensed) ships 10000 MNIST digits as JSON arrays of
intensities rounded to three decimals; round(v * 255) recovers the original
bytes exactly. Digits are shuffled with a fixed seed and split 8000/2000.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/build_mnist_subset.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

N_TRAIN = 8000


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 784)
        images.append(np.rint(arr * 255.0).astype(np.uint8))
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.vstack(images)
    labels = np.concatenate(labels)
    perm = np.random.default_rng(20200704).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    dst.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, N_TRAIN)), ("t10k", slice(N_TRAIN, None))):
        im, lb = images[sl], labels[sl]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(im), 28, 28), im.tobytes())
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(lb),), lb.tobytes())
        print(name, len(lb), np.bincount(lb, minlength=10).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
