"""Build IDX-format MNIST files from the ``mnist`` npm package.

The npm package (v1.1.0) ships 1001 real MNIST digits per class as JSON arrays
of intensities in [0, 1].  We keep 500 per class for training (5000 total) and
the rest as the test set, stratified with a fixed seed.

    python scripts/convert_npm_mnist.py --out data/mnist
    python scripts/convert_npm_mnist.py --npm-dir /path/to/package --out data/mnist
"""

import argparse
import json
import os
import subprocess
import tarfile
import tempfile

import numpy as np

from fseb.data import write_idx

PACKAGE = "mnist@1.1.0"
TRAIN_PER_CLASS = 500


def fetch_package(workdir):
    tgz = subprocess.run(
        ["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True, capture_output=True, text=True
    ).stdout.strip().splitlines()[-1]
    with tarfile.open(os.path.join(workdir, tgz)) as tf:
        tf.extractall(workdir, filter="data")
    return os.path.join(workdir, "package")


def load_digits(package_dir):
    images, labels = [], []
    for d in range(10):
        with open(os.path.join(package_dir, "src", "digits", f"{d}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        imgs = np.clip(np.rint(flat.reshape(-1, 28, 28) * 255), 0, 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), d, dtype=np.uint8))
    return images, labels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--npm-dir", help="extracted npm package (fetched with `npm pack` if omitted)")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        package_dir = args.npm_dir or fetch_package(tmp)
        images, labels = load_digits(package_dir)

    rng = np.random.default_rng(args.seed)
    parts = {"train": ([], []), "t10k": ([], [])}
    for imgs, labs in zip(images, labels):
        perm = rng.permutation(len(imgs))
        for name, idx in (("train", perm[:TRAIN_PER_CLASS]), ("t10k", perm[TRAIN_PER_CLASS:])):
            parts[name][0].append(imgs[np.sort(idx)])
            parts[name][1].append(labs[idx])

    os.makedirs(args.out, exist_ok=True)
    for name, (imgs, labs) in parts.items():
        x, y = np.concatenate(imgs), np.concatenate(labs)
        order = rng.permutation(len(x))  # interleave classes
        write_idx(
            x[order], y[order],
            os.path.join(args.out, f"{name}-images-idx3-ubyte"),
            os.path.join(args.out, f"{name}-labels-idx1-ubyte"),
        )
        print(f"{name}: {len(x)} images")


if __name__ == "__main__":
    main()
