"""Encoder-only transfer between two networks built by the package.

Network A trains briefly; its encoder is copied into a fresh B and the
decoder is drawn from scratch.  Before B trains, the two agree exactly on
every encoder activation and disagree at the output.

    python3 demos/transfer.py
"""
import numpy as np

from lesionseg import data as D
from lesionseg import netbuilder as N
from lesionseg import trainer as T
from lesionseg import weights_io as W
from lesionseg.tensor import make_rng


def main():
    spec = N.build_sgn(2, base_width=8)
    samples = D.synth_dataset(6, (32, 32), seed=8)
    a = T.train(T.RunConfig(arch=spec, epochs=5, size=(32, 32)), samples[:4], samples[4:]).final
    b, rep = W.transfer_init(spec, a, make_rng(1))
    print(f"copied {len(rep.copied)} tensors, initialised {len(rep.initialized)}, "
          f"skipped {len(rep.skipped)}, warnings {len(rep.warnings)}")

    probe = samples[5].image
    acts_a = N.forward(spec, a, probe, "infer")
    acts_b = N.forward(spec, b, probe, "infer")
    for node in spec.nodes:
        if node.kind in ("conv", "transposed_conv"):
            same = np.array_equal(acts_a[node.id], acts_b[node.id])
            print(f"  {node.id:14} {node.group:6} {'identical' if same else 'differs'}")

    # pretrained VGG weights are not bundled; a donor in conv<block>_<i> naming goes through this table
    mapping = W.mapping_table("vgg16", (2, 2, 3, 3, 3)).splitlines()
    print(f"\nshipped VGG16 donor table, {len(mapping) - 1} entries, first lines:")
    print("\n".join("  " + line for line in mapping[:5]))


if __name__ == "__main__":
    main()
