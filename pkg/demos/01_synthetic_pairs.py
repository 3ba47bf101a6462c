"""Render synthetic two-modality retina pairs and push them through augmentation.

Both modalities draw the same branching vessel tree: one with dark vessels on
a bright, unevenly lit background (colour-fundus-like), the other with bright
vessels on a dark background (angiography-like). The ground-truth mask is
shared, which is what makes the toy dataset useful for graph work.

    python demos/01_synthetic_pairs.py --out /tmp/retfuse_demo --n 4
"""
import argparse
from pathlib import Path

import numpy as np

from retfuse import data_io


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("demo_data"))
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--depth", type=int, default=3)
    args = ap.parse_args()

    pairs = data_io.synthetic_dataset(args.n, depth=args.depth, seed=0)
    records = [data_io.save_pair(p, args.out) for p in pairs]
    data_io.write_manifest(args.out / "manifest.jsonl", records)
    print(f"wrote {len(records)} pairs and a manifest to {args.out}")

    p = pairs[0]
    on, off = p.mask1, ~p.mask1
    for name, img in (("image1", p.image1), ("image2", p.image2)):
        print(f"{name}: vessel mean {img[on].mean():.3f}, background mean {img[off].mean():.3f}")
    print(f"vessel pixels: {on.mean():.1%}; masks identical: {np.array_equal(p.mask1, p.mask2)}")

    # One random augmentation is applied identically to images and masks.
    spec = data_io.AugmentationSpec.sample(np.random.default_rng(1))
    aug = data_io.augment(p, spec)
    print(f"augmentation {spec}: mask pixels {p.mask1.sum()} -> {aug.mask1.sum()}")
    assert np.array_equal(aug.mask1, aug.mask2)

    big = data_io.resize_pair(p, (288, 360))
    print(f"resized to {big.shape}; mask still binary: {big.mask1.dtype == bool}")


if __name__ == "__main__":
    main()
