"""The crop protocol, the full augmentation recipe and the noise models.

    python3 demos/augmentation.py [OUT]
"""
import sys
from pathlib import Path

import numpy as np

from lesionseg import data as D
from lesionseg.tensor import make_rng


def main(out):
    out = Path(out)
    sources = D.synth_dataset(41, (72, 96), seed=1)
    extra = D.synth_dataset(126, (48, 64), seed=2)
    crops = D.crop_protocol(sources, extra, n=10, min_lesion_frac=0.05, seed=0, target=(48, 64))
    fracs = [D.lesion_fraction(s.label) for s in crops if "|crop" in s.source_id]
    print(f"crop protocol: 41 x 10 crops + 126 uncropped = {len(crops)} samples")
    print(f"  lesion share of the crops: smallest {min(fracs):.3f}, median {np.median(fracs):.3f}")
    for n in (41, 536):
        test = D.split_counts(n, (0.7, 0.3))[-1]
        print(f"  70/30 split of {n}: {n - test} train, {test} test")

    cfg = D.AugmentConfig.full_recipe()
    print(f"full recipe: {D.expanded_count(1, cfg)} samples per source, "
          f"{D.expanded_count(len(crops), cfg)} from the cropped set")
    few = D.expand_augmented(crops[:2], cfg, seed=0)
    D.save_samples(few, out / "expanded")
    print(f"  wrote {len(few)} expanded samples of 2 sources to {out / 'expanded'}")

    flat = np.full((1, 250, 400), 0.5, np.float32)
    rng = make_rng(0)
    print("noise on a constant 0.5 image of 10^5 pixels:")
    print(f"  gaussian     added variance {(D.add_noise(flat, 'gaussian', rng) - 0.5).var():.5f}")
    print(f"  speckle      multiplicative variance {((D.add_noise(flat, 'speckle', rng) - 0.5) / 0.5).var():.5f}")
    print(f"  salt&pepper  corrupted share {(D.add_noise(flat, 'salt_pepper', rng) != 0.5).mean():.4f}")
    print(f"  poisson      variance {D.add_noise(flat, 'poisson', rng).var():.5f} (expected {0.5 / 255:.5f})")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "augmentation_demo")
