"""Rebuild the canonical MNIST IDX files from the classic ``mnist.pkl.gz``.

``mnist.pkl.gz`` holds the official 60k/10k split as 50k train + 10k
validation + 10k test, with every pixel stored as ``byte / 256``; this
script recovers the original bytes exactly and writes the four
``*-ubyte.gz`` files that :func:`midl.data.load_mnist` reads.

One offline source of the pickle is the ``mnist-hub`` wheel on PyPI::

    pip download --no-deps mnist-hub -d /tmp/mnist-hub
    python -m zipfile -e /tmp/mnist-hub/*.whl /tmp/mnist-hub/x
    python scripts/prepare_mnist.py /tmp/mnist-hub/x/mnist/data/mnist.pkl.gz data/mnist
"""
import argparse
import gzip
import os
import pickle

import numpy as np

from midl.data import MNIST_FILES, write_idx


def to_bytes(x):
    b = np.rint(np.asarray(x, dtype=np.float64) * 256.0)
    if b.min() < 0 or b.max() > 255:
        raise SystemExit("pixel values out of the expected [0, 255/256] range")
    return b.astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("pickle_path")
    ap.add_argument("out_dir")
    args = ap.parse_args()

    with gzip.open(args.pickle_path, "rb") as f:
        train, valid, test = pickle.load(f, encoding="latin1")
    os.makedirs(args.out_dir, exist_ok=True)
    splits = {
        "train": (np.concatenate([train[0], valid[0]]), np.concatenate([train[1], valid[1]])),
        "test": test,
    }
    for split, (images, labels) in splits.items():
        img_name, lab_name = MNIST_FILES[split]
        write_idx(os.path.join(args.out_dir, img_name + ".gz"), to_bytes(images).reshape(-1, 28, 28))
        write_idx(os.path.join(args.out_dir, lab_name + ".gz"), np.asarray(labels, dtype=np.uint8))
        print(f"{split}: {len(labels)} images -> {args.out_dir}")


if __name__ == "__main__":
    main()
