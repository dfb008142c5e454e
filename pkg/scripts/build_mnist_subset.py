"""Build the bundled MNIST subset under data/mnist/ from mlxtend's 5000-digit sample.

Writes gzip-compressed IDX files using the standard MNIST names; a seeded
permutation splits the sample into 4000 training and 1000 test digits.

    pip install --no-deps mlxtend
    python scripts/build_mnist_subset.py [--out data/mnist] [--test 1000] [--seed 0]
"""
import argparse
import gzip
from pathlib import Path

import numpy as np

from jpmap.mnist import write_idx_images, write_idx_labels


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    import mlxtend.data
    csv = Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"
    table = np.loadtxt(gzip.open(csv, "rt"), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]
    order = np.random.default_rng(args.seed).permutation(len(images))
    test, train = order[:args.test], order[args.test:]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(images[train], out / "train-images-idx3-ubyte.gz", compress=True)
    write_idx_labels(labels[train], out / "train-labels-idx1-ubyte.gz", compress=True)
    write_idx_images(images[test], out / "t10k-images-idx3-ubyte.gz", compress=True)
    write_idx_labels(labels[test], out / "t10k-labels-idx1-ubyte.gz", compress=True)
    print(f"wrote {len(train)} training and {len(test)} test digits to {out}")


if __name__ == "__main__":
    main()
