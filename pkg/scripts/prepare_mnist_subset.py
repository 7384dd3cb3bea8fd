"""Build the desk-scale MNIST IDX files from the canonical MNIST release.

train: 10,000 digits drawn (seeded) from the 60,000-digit training file.
val:   1,000 further digits from the training file, disjoint from train.
test:  the full 10,000-digit test file in a seeded order, so any prefix is a
       uniform sample of it.

The source may be a directory holding the four IDX files (raw or ``.gz``) or
the npm ``mnist-data`` 1.2.6 tarball, which ships them under ``package/data``.

Usage:
    python scripts/prepare_mnist_subset.py --source mnist-data-1.2.6.tgz --out data/mnist-desk
"""
from __future__ import annotations

import argparse
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from rdinet.data import load_idx, write_idx

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        hits = list(root.rglob(name))
        if hits:
            return hits[0]
    raise FileNotFoundError(f"{stem} not found under {root}")


def load_canonical(root: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for split, (imgs, labs) in FILES.items():
        ds = load_idx(find(root, imgs), find(root, labs), split)
        out[split] = (np.rint(ds.images[..., 0] * 255).astype(np.uint8), ds.labels)
    return out


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--source", type=Path, required=True, help="directory with the IDX files or the mnist-data tarball")
    ap.add_argument("--out", type=Path, default=Path("data/mnist-desk"))
    ap.add_argument("--train-size", type=int, default=10_000)
    ap.add_argument("--val-size", type=int, default=1_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        root = args.source
        if root.is_file():
            with tarfile.open(root) as tf:
                tf.extractall(tmp, filter="data")
            root = Path(tmp)
        data = load_canonical(root)

    rng = np.random.default_rng(args.seed)
    tx, ty = data["train"]
    perm = rng.permutation(len(tx))
    tr, va = perm[: args.train_size], perm[args.train_size : args.train_size + args.val_size]
    ex, ey = data["test"]
    order = rng.permutation(len(ex))
    splits = {"train": (tx[tr], ty[tr]), "val": (tx[va], ty[va]), "test": (ex[order], ey[order])}
    args.out.mkdir(parents=True, exist_ok=True)
    for name, (x, y) in splits.items():
        write_idx(args.out / f"{name}-images-idx3-ubyte.gz", args.out / f"{name}-labels-idx1-ubyte.gz", x, y)
        print(f"{name}: {len(x)} images, class counts {np.bincount(y, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
