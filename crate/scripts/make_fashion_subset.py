"""Build the desk-scale Fashion-MNIST subset as IDX files.

Source: the `fashion-mnist` npm package (v1.1.0, MIT), which ships the
28x28 images as `src/clothes/<label>.json`, each `{"data": [[784 ints]]}`.

    npm pack fashion-mnist@1.1.0 && tar xzf fashion-mnist-1.1.0.tgz
    python3 scripts/make_fashion_subset.py package/src/clothes data

Writes a class-balanced, seeded selection: 500 training and 100 test
images per class, disjoint, in shuffled order.
"""

import argparse
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100
SEED = 20201019


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("clothes_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    rng = np.random.RandomState(SEED)
    train_x, train_y, test_x, test_y = [], [], [], []
    for label in range(10):
        rows = json.loads((args.clothes_dir / f"{label}.json").read_text())["data"]
        # the package carries a couple of empty placeholder rows per class
        data = np.asarray([r for r in rows if len(r) == 784])
        assert data.shape[1] == 784 and data.min() >= 0 and data.max() <= 255
        pick = rng.permutation(len(data))[: TRAIN_PER_CLASS + TEST_PER_CLASS]
        train_x.append(data[pick[:TRAIN_PER_CLASS]])
        test_x.append(data[pick[TRAIN_PER_CLASS:]])
        train_y += [label] * TRAIN_PER_CLASS
        test_y += [label] * TEST_PER_CLASS

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, xs, ys in [("train", train_x, train_y), ("test", test_x, test_y)]:
        x = np.concatenate(xs)
        y = np.asarray(ys)
        order = rng.permutation(len(y))
        img = args.out_dir / f"fmnist-{name}-images-idx3-ubyte"
        lab = args.out_dir / f"fmnist-{name}-labels-idx1-ubyte"
        write_images(img, x[order])
        write_labels(lab, y[order])
        for p in (img, lab):
            print(p, hashlib.sha256(p.read_bytes()).hexdigest())


if __name__ == "__main__":
    main()
