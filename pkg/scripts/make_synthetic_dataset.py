#!/usr/bin/env python3
"""Materialize a synthetic dataset in the on-disk layouts the CLI reads.

Writes a WSI-style tree (directory slides + annotation XMLs) and a
microscopy-style tree (class folders of 2048x1536 images), ready for
`patchbag run-experiment` with ds1_root/ds2_root pointing at the output.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from patchbag.synthetic import SyntheticSpec, write_microscopy_dataset, write_wsi_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path, help="output directory")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--polygons-per-class", type=int, default=4)
    parser.add_argument("--images-per-class", type=int, default=3)
    args = parser.parse_args()

    spec = SyntheticSpec(seed=args.seed, polygons_per_class=args.polygons_per_class)
    ds2 = write_wsi_dataset(args.out / "ds2", spec)
    ds1 = write_microscopy_dataset(args.out / "ds1", seed=args.seed,
                                   images_per_class=args.images_per_class)
    print(f"wrote WSI dataset to {ds2}")
    print(f"wrote microscopy dataset to {ds1}")
    print("point a config file at these roots, e.g.:")
    print(f"  ds1_root = {ds1}\n  ds2_root = {ds2}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
