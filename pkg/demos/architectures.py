"""Build every preset and compare sizes, depths and skip styles.

    python3 demos/architectures.py
"""
from lesionseg import netbuilder as N


def main():
    print(f"{'preset':10} {'depth':>5} {'skips':>5} {'convs':>5} {'params':>12}")
    for name in N.PRESETS:
        spec = N.build_preset(name)
        convs = sum(n.kind == "conv" for n in spec.nodes)
        print(f"{name:10} {spec.encoder_depth:>5} {spec.skip_style:>5} {convs:>5} {spec.param_count():>12,}")

    # the graph text is the checkpoint's architecture record
    print("\nSGN1 as stored in a checkpoint:\n")
    print(N.graph_to_text(N.build_sgn(1)))


if __name__ == "__main__":
    main()
