"""Build the bundled 10,000-digit MNIST subset as standard IDX files.

Source: the per-class JSON digit files of the ``mnist`` npm package (v1.1.0),
which store 28x28 images as flat arrays of intensities in [0, 1]. Values are
mapped back to bytes with ``round(255 * v)``, the digits are shuffled with a
fixed seed, and the first 8,000 become the train split.

Usage: python3 scripts/build_mnist_subset.py DIGITS_DIR OUT_DIR
"""
import argparse
import json
import os

import numpy as np

from adlm.data import MNIST_FILES, write_idx

N_TRAIN = 8000
SEED = 20180101


def load_digits(digits_dir):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(digits_dir, f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255.0).clip(0, 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(imgs.shape[0], digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    args = ap.parse_args(argv)
    images, labels = load_digits(args.digits_dir)
    order = np.random.default_rng(SEED).permutation(labels.size)
    images, labels = images[order], labels[order]
    os.makedirs(args.out_dir, exist_ok=True)
    for split, sl in (("train", slice(0, N_TRAIN)), ("test", slice(N_TRAIN, None))):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(os.path.join(args.out_dir, img_name + ".gz"), images[sl])
        write_idx(os.path.join(args.out_dir, lab_name + ".gz"), labels[sl])
        print(f"{split}: {labels[sl].size} digits, class counts {np.bincount(labels[sl], minlength=10).tolist()}")


if __name__ == "__main__":
    main()
