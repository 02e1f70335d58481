"""Write a desk-scale MNIST split as IDX files.

Source: the 5,000-example MNIST sample bundled with ``mlxtend``
(``pip install mlxtend``). If you have the official IDX files, point the
config at them instead; this script only exists because the canonical
download hosts may be unreachable.

    python3 scripts/prepare_mnist.py --out data/mnist --train 2000 --test 1000
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from fastadv.data import load_idx, write_idx


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    from mlxtend.data import mnist_data  # optional dependency, only needed here

    x, y = mnist_data()
    x = np.asarray(x).reshape(-1, 28, 28)
    if x.min() < 0 or x.max() > 255:
        raise SystemExit(f"unexpected pixel range [{x.min()}, {x.max()}]")
    x = np.rint(x).astype(np.uint8)
    y = np.asarray(y).astype(np.uint8)
    if args.train % 10 or args.test % 10:
        raise SystemExit("--train and --test must be multiples of 10")
    # the bundled sample is sorted by class: draw a seeded, class-balanced split
    rng = np.random.default_rng(args.seed)
    per_train, per_test = args.train // 10, args.test // 10
    tr, te = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        tr.append(idx[:per_train])
        te.append(idx[per_train:per_train + per_test])
    splits = {"train": rng.permutation(np.concatenate(tr)),
              "t10k": rng.permutation(np.concatenate(te))}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, sl in splits.items():
        images = out / f"{prefix}-images-idx3-ubyte"
        labels = out / f"{prefix}-labels-idx1-ubyte"
        write_idx(x[sl], y[sl], images, labels)
        ds = load_idx(images, labels)
        counts = np.bincount(ds.y, minlength=10)
        print(f"{images}: {len(ds)} examples, class counts {counts.tolist()}")


if __name__ == "__main__":
    main()
