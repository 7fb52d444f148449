"""Build the desk digit dataset in IDX format.

Source: the 8x8 handwritten digits bundled with scikit-learn (UCI optdigits,
1,797 images). Each image is bilinearly upsampled to SIZE x SIZE, rescaled to
0..255 and split deterministically into train/test.

    python3 scripts/make_desk_digits.py [--size 28] [--test 600] [--out data]
"""

import argparse
import os
import struct

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=28)
    ap.add_argument("--test", type=int, default=600)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="data")
    args = ap.parse_args()

    digits = load_digits()
    imgs = digits.images / 16.0
    up = np.stack(
        [
            np.asarray(
                Image.fromarray((im * 255.0).astype(np.float32), mode="F").resize(
                    (args.size, args.size), Image.BILINEAR
                )
            )
            for im in imgs
        ]
    )
    up = np.clip(np.rint(up), 0, 255)

    order = np.random.RandomState(args.seed).permutation(len(up))
    up, labels = up[order], digits.target[order]
    test, train = slice(0, args.test), slice(args.test, None)

    os.makedirs(args.out, exist_ok=True)
    write_images(os.path.join(args.out, "train-images-idx3-ubyte"), up[train])
    write_labels(os.path.join(args.out, "train-labels-idx1-ubyte"), labels[train])
    write_images(os.path.join(args.out, "test-images-idx3-ubyte"), up[test])
    write_labels(os.path.join(args.out, "test-labels-idx1-ubyte"), labels[test])
    print(f"train={len(labels[train])} test={len(labels[test])} size={args.size}")


if __name__ == "__main__":
    main()
