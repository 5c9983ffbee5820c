"""Write He-initialised random weights for a network spec.

    python scripts/make_random_weights.py spec.yaml weights.ntc [--seed 0]

Use ``--small`` to also write the narrow three-conv spec used by the
synthetic benchmark instead of reading one.
"""

import argparse

from flankid.cnn import load_spec, random_weights, save_spec, save_weights
from flankid.synthetic import small_conv_spec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("spec")
    p.add_argument("weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--small", action="store_true", help="write the small benchmark spec to SPEC first")
    args = p.parse_args()
    if args.small:
        save_spec(small_conv_spec(), args.spec)
    spec = load_spec(args.spec)
    weights = random_weights(spec, args.seed)
    save_weights(weights, args.weights)
    n = sum(v.size for v in weights.values())
    print(f"{spec.name}: {len(weights)} tensors, {n} parameters -> {args.weights}")


if __name__ == "__main__":
    main()
