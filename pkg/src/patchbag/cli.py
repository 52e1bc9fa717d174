"""`patchbag` command line interface.

    patchbag <command> --config <path> [--seed N] [--jobs N] [--scale {0,1,2}]
             [--scope {region,global}] [--order {raster,serpentine}] [--force]

Commands: extract-regions, tile, features, vocab, encode, train, crossval,
run-experiment {exp1-ds1|exp1-ds2|exp2-merged|exp3-scales}, validate-features.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .binio import FileFormatError
from .config import ConfigError, parse_config
from .features import read_feature_file
from .pipeline import (
    MissingArtifactError,
    StageRunner,
    run_experiment,
    stage_crossval,
    stage_encode,
    stage_extract_regions,
    stage_features,
    stage_tile,
    stage_train,
    stage_vocab,
)

STAGES = {
    "extract-regions": stage_extract_regions,
    "tile": stage_tile,
    "features": stage_features,
    "vocab": stage_vocab,
    "encode": stage_encode,
    "train": stage_train,
    "crossval": stage_crossval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchbag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--jobs", type=int, help="parallel workers within a stage")
        p.add_argument("--scale", type=int, choices=(0, 1, 2), help="pyramid scale")
        p.add_argument("--scope", choices=("region", "global"), help="vocabulary scope")
        p.add_argument("--order", choices=("raster", "serpentine"), help="patch scan order")
        p.add_argument("--force", action="store_true", help="ignore the stage cache")
        p.add_argument("--quiet", action="store_true")

    for name in STAGES:
        add_common(sub.add_parser(name))

    exp = sub.add_parser("run-experiment")
    exp.add_argument("preset", choices=("exp1-ds1", "exp1-ds2", "exp2-merged", "exp3-scales"))
    add_common(exp)

    val = sub.add_parser("validate-features", help="check .pbfv files and print their headers")
    val.add_argument("paths", nargs="+")
    val.add_argument("--json", action="store_true", dest="as_json")
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.jobs is not None:
        out["jobs"] = args.jobs
    if args.scale is not None:
        out["scale"] = args.scale
    if args.scope is not None:
        out["vocab_scope"] = args.scope
    if args.order is not None:
        out["scan_order"] = args.order
    return out


def cmd_validate_features(args) -> int:
    failures = 0
    for raw in args.paths:
        path = Path(raw)
        try:
            dset = read_feature_file(path)
        except (FileFormatError, OSError) as err:
            failures += 1
            if args.as_json:
                print(json.dumps({"path": str(path), "valid": False, "error": str(err)}))
            else:
                print(f"{path}: INVALID ({err})")
            continue
        info = {
            "path": str(path),
            "valid": True,
            "region_id": dset.region_id,
            "label": dset.label.display,
            "scale": dset.scale,
            "extractor_id": dset.extractor_id,
            "n_patches": dset.n_patches,
            "R": dset.r,
            "d": dset.d,
        }
        if args.as_json:
            print(json.dumps(info, sort_keys=True))
        else:
            print(
                f"{path}: ok region={dset.region_id} label={dset.label.display} "
                f"n={dset.n_patches} R={dset.r} d={dset.d} extractor={dset.extractor_id}"
            )
    return 1 if failures else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate-features":
        return cmd_validate_features(args)

    try:
        config = parse_config(args.config, overrides=_overrides(args))
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    if args.force and Path(config.workdir).exists():
        for stamps in Path(config.workdir).rglob(".stamps"):
            shutil.rmtree(stamps)

    try:
        if args.command == "run-experiment":
            run_experiment(config, args.preset, quiet=args.quiet)
        else:
            runner = StageRunner(config, quiet=args.quiet)
            STAGES[args.command](runner)
    except MissingArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ConfigError, FileFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
