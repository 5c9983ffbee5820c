"""AP/mAP over the NMS threshold sweep on synthetic detector proposals.

    python scripts/nms_sweep_demo.py --out /tmp/sweep [--seed 0]

Proposals are jittered copies of the ground truth plus overlapping
duplicates and clutter. Loose thresholds keep the duplicates, which then
count as false positives and pull AP down.
"""

import argparse
from pathlib import Path

from flankid.annotations import build_manifest, save_manifest
from flankid.cli import main as cli
from flankid.detection import save_raw_detections
from flankid.synthetic import generate_dataset, synthesize_detections


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duplicates", type=int, default=3)
    args = p.parse_args()
    paths = generate_dataset(args.out / "data", n_individuals=6, n_views=5, seed=args.seed)
    manifest = build_manifest(paths["annotations"], paths["identities"], species="tiger")
    save_manifest(manifest, args.out / "manifest.json")
    raw = synthesize_detections(manifest.records, seed=args.seed, n_duplicates=args.duplicates)
    save_raw_detections(raw, args.out / "raw.csv")
    raise SystemExit(cli(["detect-eval", str(args.out / "manifest.json"), str(args.out / "raw.csv"),
                          "--out", str(args.out / "sweep.tsv")]))


if __name__ == "__main__":
    main()
