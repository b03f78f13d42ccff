#!/usr/bin/env python3
"""Fetch MNIST digit data and write it as IDX files under data/mnist/.

Tries, in order:
  1. nothing, if the IDX files are already present;
  2. the official gzipped IDX files from public mirrors (needs internet);
  3. the `mnist` npm package (10k genuine MNIST samples bundled as JSON),
     which works against npm registry mirrors without general internet.

Route 2 yields the canonical 60k/10k split. Route 3 yields a 9k/1k split
(per class: first 90% train, last 10% test, fixed-seed shuffle). Either way
the output is standard big-endian IDX readable by simtext.

Usage: python scripts/fetch_mnist.py [--dest data/mnist]
"""

from __future__ import annotations

import argparse
import gzip
import json
import shutil
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
from simtext.data import write_idx  # noqa: E402

FILES = {
    "train-images-idx3-ubyte": "train images",
    "train-labels-idx1-ubyte": "train labels",
    "t10k-images-idx3-ubyte": "test images",
    "t10k-labels-idx1-ubyte": "test labels",
}
MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]


def have_all(dest: Path) -> bool:
    return all((dest / name).is_file() for name in FILES)


def try_official(dest: Path) -> bool:
    for mirror in MIRRORS:
        try:
            for name in FILES:
                url = f"{mirror}{name}.gz"
                print(f"downloading {url}")
                with urllib.request.urlopen(url, timeout=30) as r:
                    blob = gzip.decompress(r.read())
                (dest / name).write_bytes(blob)
            return True
        except Exception as e:  # noqa: BLE001
            print(f"  mirror failed: {e}")
    return False


def try_npm(dest: Path) -> bool:
    if shutil.which("npm") is None:
        print("npm not available")
        return False
    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        try:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                           capture_output=True, text=True, timeout=300)
        except (subprocess.CalledProcessError, subprocess.TimeoutExpired) as e:
            print(f"npm pack failed: {e}")
            return False
        tarballs = list(tmp_path.glob("mnist-*.tgz"))
        if not tarballs:
            return False
        with tarfile.open(tarballs[0]) as tar:
            tar.extractall(tmp_path)
        train_imgs, train_labels, test_imgs, test_labels = [], [], [], []
        for digit in range(10):
            blob = json.loads((tmp_path / "package" / "src" / "digits"
                               / f"{digit}.json").read_text())
            flat = np.array(blob["data"], dtype=np.float64)
            imgs = np.round(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
            n_train = int(imgs.shape[0] * 0.9)
            train_imgs.append(imgs[:n_train])
            train_labels.extend([digit] * n_train)
            test_imgs.append(imgs[n_train:])
            test_labels.extend([digit] * (imgs.shape[0] - n_train))
        rng = np.random.default_rng(12345)
        for imgs_list, labels, prefix in (
            (train_imgs, train_labels, "train"),
            (test_imgs, test_labels, "t10k"),
        ):
            imgs = np.concatenate(imgs_list)
            labels = np.array(labels, dtype=np.uint8)
            order = rng.permutation(imgs.shape[0])
            write_idx(imgs[order], labels[order],
                      dest / f"{prefix}-images-idx3-ubyte",
                      dest / f"{prefix}-labels-idx1-ubyte")
            print(f"wrote {prefix}: {imgs.shape[0]} samples")
        return True


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--dest",
        default=Path(__file__).resolve().parent.parent / "data" / "mnist")
    args = parser.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    if have_all(dest):
        print(f"already present in {dest}")
        return 0
    if try_official(dest) or try_npm(dest):
        print(f"done: {dest}")
        return 0
    print("could not obtain MNIST from any source", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
