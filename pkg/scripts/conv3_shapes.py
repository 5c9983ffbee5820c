"""Print the per-layer output shape of a network spec for each species preset.

    python scripts/conv3_shapes.py [--net-spec path/to/spec.yaml]
"""

import argparse

from flankid.cnn import layer_output_shape, load_spec
from flankid.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--net-spec", help="spec YAML (default: the bundled AlexNet conv3 stack)")
    args = p.parse_args()
    for species in ("tiger", "zebra", "jaguar"):
        cfg = load_config(species=species)
        w, h = cfg.flank_resize
        spec = load_spec(args.net_spec or cfg.net_spec).with_input(h, w)
        print(f"{species}: input {w}x{h}")
        shape = (spec.input[2], spec.input[0], spec.input[1])
        for layer in spec.layers[:spec.tap_point + 1]:
            shape = layer_output_shape(layer, shape)
            c, hh, ww = shape
            print(f"  {layer.name:<8} {layer.kind:<8} {c:>4} x {hh:>3} x {ww:>3}")
        c, hh, ww = shape
        print(f"  feature dimension {c * hh * ww}")


if __name__ == "__main__":
    main()
