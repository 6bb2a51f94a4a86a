"""Build a small offline MNIST split from the 5000-digit sample shipped in the mlxtend wheel.

The sample holds 500 digits per class (drawn from the MNIST training set).
It is shuffled with a fixed seed and split 400/100 per class into
train/test IDX files under data/mnist/.

    python3 scripts/prepare_mnist_subset.py [--wheel PATH] [--out data/mnist]

Without --wheel the script runs `pip download --no-deps mlxtend`.
"""
from __future__ import annotations

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from rfad.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:",
                    "-d", str(dest), "mlxtend==0.24.0"], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def read_sample(wheel: Path) -> tuple[np.ndarray, np.ndarray]:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def split(images, labels, train_per_class: int = 400, seed: int = 0):
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        tr.append(idx[:train_per_class])
        te.append(idx[train_per_class:])
    tr = rng.permutation(np.concatenate(tr))
    te = rng.permutation(np.concatenate(te))
    return (images[tr], labels[tr]), (images[te], labels[te])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=Path)
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(Path(tmp))
        images, labels = read_sample(wheel)
    (xtr, ytr), (xte, yte) = split(images, labels, args.train_per_class)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", xtr)
    write_idx(args.out / "train-labels-idx1-ubyte.gz", ytr)
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", xte)
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", yte)
    print(f"wrote {len(ytr)} train / {len(yte)} test digits to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
