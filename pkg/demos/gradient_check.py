"""Compare analytic gradients with central differences.

Each layer is checked through a random projection ``<f(x), probe>`` so one
finite-difference sweep covers the whole vector-Jacobian product.  The
network check perturbs every trainable parameter of a 154-parameter SGN1.

    python3 demos/gradient_check.py
"""
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

import gradsuite as G  # noqa: E402
from lesionseg.tensor import make_rng  # noqa: E402


def main():
    print(f"{'layer':14} worst relative error over 10 points")
    for name, case in G.LAYER_CASES.items():
        worst = max(max(case(make_rng(k)).values()) for k in range(10))
        print(f"{name:14} {worst:.2e}")
    spec = G.mini_network()
    errs = [G.network_error(seed) for seed in range(5)]
    print(f"\nSGN1 with base width 1 ({spec.param_count()} parameters), 3x8x8 input")
    print("  " + "  ".join(f"{e:.2e}" for e in errs))
    fcn = [G.network_error(seed, G.mini_fcn(), size=(7, 9)) for seed in range(3)]
    print("two-stage FCN with additive fusion, 3x7x9 input")
    print("  " + "  ".join(f"{e:.2e}" for e in fcn))


if __name__ == "__main__":
    main()
