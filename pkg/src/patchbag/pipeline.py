"""Stage orchestration: each command reads its upstream artifacts from the
working directory, writes its own, and records a manifest entry keyed by a
hash of (parameters, input contents). A stage whose key and outputs are
unchanged is skipped; a key mismatch marks the artifacts stale and reruns.

Working directory layout:

    workdir/
      regions/<region_id>/{image.png, mask.png, meta.json}
      regions/skips.csv
      patches/{<region_id>_<seq>.png, sets.csv}
      features/<region_id>.pbfv
      vocab/{global.pbcb | <region_id>.pbcb}
      encoded/table.csv
      model/mlp.pbml
      reports/{fold_metrics.csv, summary.csv, confusion.csv}
      manifest.jsonl, .stamps/
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import bovw, classifier, evaluation
from .annotations import parse_annotations
from .config import PipelineConfig
from .features import (
    DescriptorSet,
    extract_set_baseline,
    read_feature_file,
    write_feature_file,
)
from .labels import Label, parse_label
from .regions import (
    OrientedRegion,
    OversizedRegionError,
    extract_annotated_region,
    sample_normal_regions,
)
from .seeding import derive_seed
from .slides import DirectorySlide
from .tiler import (
    PatchSet,
    emit_patches,
    load_patch_pixels,
    read_manifest,
    tile_microscopy,
    tile_region,
)


class MissingArtifactError(RuntimeError):
    """Upstream stage output absent; message names the producing command."""

    def __init__(self, missing: Path, command: str):
        super().__init__(
            f"missing artifact {missing}; produce it first with `patchbag {command}`"
        )
        self.missing = missing
        self.command = command


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(root: Path) -> dict[str, str]:
    if root.is_file():
        return {root.name: _hash_file(root)}
    return {
        str(p.relative_to(root)): _hash_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class StageRunner:
    """Content-addressed stage cache plus the append-only run manifest."""

    def __init__(self, config: PipelineConfig, quiet: bool = False):
        self.config = config
        self.workdir = Path(config.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.quiet = quiet

    def _log(self, message: str) -> None:
        if not self.quiet:
            print(message, file=sys.stderr)

    def run(self, name: str, params: dict, inputs: list[Path], produce, outputs: list[Path]):
        key_material = {
            "stage": name,
            "params": {k: str(v) for k, v in sorted(params.items())},
            "inputs": {},
        }
        for path in inputs:
            path = Path(path)
            if not path.exists():
                raise MissingArtifactError(path, _PRODUCER.get(path.name, name))
            key_material["inputs"].update(
                {f"{path.name}/{k}": v for k, v in _hash_tree(path).items()}
            )
        key = hashlib.sha256(
            json.dumps(key_material, sort_keys=True).encode()
        ).hexdigest()

        stamp_path = self.workdir / ".stamps" / f"{name}.json"
        if stamp_path.exists():
            stamp = json.loads(stamp_path.read_text())
            if stamp.get("key") == key and self._outputs_fresh(stamp.get("outputs", {})):
                self._log(f"[{name}] cached, skipping")
                return
            if stamp.get("key") != key:
                self._log(f"[{name}] stale artifacts, rerunning")

        produce()

        out_hashes = {}
        for path in outputs:
            path = Path(path)
            if path.exists():
                out_hashes.update(
                    {f"{path.relative_to(self.workdir)}/{k}": v for k, v in _hash_tree(path).items()}
                    if path.is_dir()
                    else {str(path.relative_to(self.workdir)): _hash_file(path)}
                )
        stamp_path.parent.mkdir(exist_ok=True)
        stamp_path.write_text(json.dumps({"key": key, "outputs": out_hashes}, sort_keys=True))
        record = {
            "stage": name,
            "key": key,
            "params": key_material["params"],
            "outputs": out_hashes,
        }
        with open(self.workdir / "manifest.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._log(f"[{name}] done ({len(out_hashes)} files)")

    def _outputs_fresh(self, recorded: dict[str, str]) -> bool:
        for rel, digest in recorded.items():
            path = self.workdir / rel
            if not path.exists() or _hash_file(path) != digest:
                return False
        return True


_PRODUCER = {
    "regions": "extract-regions",
    "patches": "tile",
    "sets.csv": "tile",
    "features": "features",
    "vocab": "vocab",
    "table.csv": "encode",
}


# ---------------------------------------------------------------- regions


def _region_meta(region: OrientedRegion) -> dict:
    return {
        "region_id": region.region_id,
        "label": region.label.display,
        "scale": region.scale,
        "rotation_deg": region.rotation_deg,
        "bbox": list(region.bbox),
    }


def save_region(region: OrientedRegion, regions_dir: Path) -> None:
    out = regions_dir / region.region_id
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(region.image).save(out / "image.png", format="PNG")
    Image.fromarray(region.mask.astype(np.uint8) * 255).save(out / "mask.png", format="PNG")
    (out / "meta.json").write_text(json.dumps(_region_meta(region), sort_keys=True))


def load_region(region_dir: Path) -> OrientedRegion:
    meta = json.loads((region_dir / "meta.json").read_text())
    image = np.asarray(Image.open(region_dir / "image.png").convert("RGB"))
    mask = np.asarray(Image.open(region_dir / "mask.png").convert("L")) > 127
    return OrientedRegion(
        region_id=meta["region_id"],
        label=parse_label(meta["label"]),
        scale=meta["scale"],
        image=image,
        mask=mask,
        rotation_deg=meta["rotation_deg"],
        bbox=tuple(meta["bbox"]),
    )


def _extract_one_slide(args) -> tuple[list[str], list[tuple[str, str, int]]]:
    """Worker: extract one slide's annotated regions + sampled normals into
    the region store. Returns (region_ids, skip records)."""
    slide_dir, ann_path, regions_dir, cfg = args
    slide = DirectorySlide(slide_dir)
    annotations = parse_annotations(ann_path) if ann_path.exists() else []
    saved: list[str] = []
    skips: list[tuple[str, str, int]] = []
    for i, ann in enumerate(annotations):
        region_id = f"{slide.slide_id}_r{i:02d}"
        try:
            region = extract_annotated_region(
                slide, ann, region_id, cfg.scale, cfg.max_region_pixels
            )
        except OversizedRegionError as err:
            skips.append((region_id, "max_pixels_exceeded", err.pixel_count))
            continue
        save_region(region, regions_dir)
        saved.append(region_id)
    normals, shortfall = sample_normal_regions(
        slide,
        annotations,
        cfg.normal_per_slide,
        rng_seed=derive_seed(cfg.seed, "normals", slide.slide_id),
        scale=cfg.scale,
        region_size=cfg.normal_region_size,
        tissue_threshold=cfg.tissue_threshold,
        background_level=cfg.background_rgb,
    )
    for region in normals:
        save_region(region, regions_dir)
        saved.append(region.region_id)
    if shortfall is not None:
        skips.append(
            (f"{slide.slide_id}_normals", f"shortfall_{shortfall.placed}_of_{shortfall.requested}", 0)
        )
    return saved, skips


def stage_extract_regions(runner: StageRunner) -> None:
    cfg = runner.config
    if cfg.ds2_root is None:
        raise MissingArtifactError(Path("<ds2_root>"), "extract-regions (set ds2_root)")
    slides_root = cfg.ds2_root / "slides"
    ann_root = cfg.ds2_root / "annotations"
    regions_dir = runner.workdir / "regions"

    def produce():
        regions_dir.mkdir(parents=True, exist_ok=True)
        slide_dirs = sorted(p for p in slides_root.iterdir() if p.is_dir())
        tasks = [
            (d, ann_root / f"{d.name}.xml", regions_dir, cfg) for d in slide_dirs
        ]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                results = list(pool.map(_extract_one_slide, tasks))
        else:
            results = [_extract_one_slide(t) for t in tasks]
        with open(regions_dir / "skips.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region_id", "reason", "pixel_count"])
            for _, skips in results:
                writer.writerows(skips)

    runner.run(
        "extract-regions",
        {
            "scale": cfg.scale,
            "seed": cfg.seed,
            "max_region_pixels": cfg.max_region_pixels,
            "normal_per_slide": cfg.normal_per_slide,
            "normal_region_size": cfg.normal_region_size,
            "tissue_threshold": cfg.tissue_threshold,
            "background_rgb": cfg.background_rgb,
        },
        inputs=[slides_root, ann_root],
        produce=produce,
        outputs=[regions_dir],
    )


# ---------------------------------------------------------------- tiling


def stage_tile(runner: StageRunner) -> None:
    cfg = runner.config
    patches_dir = runner.workdir / "patches"

    if cfg.dataset == "ds1":
        if cfg.ds1_root is None:
            raise MissingArtifactError(Path("<ds1_root>"), "tile (set ds1_root)")
        inputs = [cfg.ds1_root]

        def produce():
            patches_dir.mkdir(parents=True, exist_ok=True)
            for label in Label:
                class_dir = cfg.ds1_root / label.display
                if not class_dir.is_dir():
                    continue
                for img_path in sorted(class_dir.glob("*.png")):
                    image = np.asarray(Image.open(img_path).convert("RGB"))
                    ps = tile_microscopy(
                        image, f"{label.display.lower()}_{img_path.stem}", label, cfg.order
                    )
                    emit_patches(ps, patches_dir)

    else:
        regions_dir = runner.workdir / "regions"
        inputs = [regions_dir]

        def produce():
            patches_dir.mkdir(parents=True, exist_ok=True)
            for region_dir in sorted(p for p in regions_dir.iterdir() if p.is_dir()):
                region = load_region(region_dir)
                ps = tile_region(region, cfg.order, cfg.background_threshold)
                emit_patches(ps, patches_dir)

    runner.run(
        "tile",
        {
            "dataset": cfg.dataset,
            "scan_order": cfg.scan_order,
            "background_threshold": cfg.background_threshold,
        },
        inputs=inputs,
        produce=produce,
        outputs=[patches_dir],
    )


# ---------------------------------------------------------------- features


def _extract_one_set(args) -> None:
    patches_dir, features_dir, record, grid = args
    pixels = load_patch_pixels(patches_dir, record["region_id"], record["n_patches"])
    dset = extract_set_baseline(
        pixels, record["region_id"], parse_label(record["label"]), record["scale"], grid
    )
    write_feature_file(dset, features_dir / f"{record['region_id']}.pbfv")


def stage_features(runner: StageRunner) -> None:
    cfg = runner.config
    patches_dir = runner.workdir / "patches"
    features_dir = runner.workdir / "features"

    if cfg.extractor == "imported":
        source = cfg.features_dir
        if source is None:
            raise MissingArtifactError(Path("<features_dir>"), "features (set features_dir)")

        def produce():
            features_dir.mkdir(parents=True, exist_ok=True)
            for record in read_manifest(patches_dir):
                src = source / f"{record['region_id']}.pbfv"
                if not src.exists():
                    raise MissingArtifactError(src, "features (run the exporter)")
                dset = read_feature_file(src)  # validates magic/CRC/shape
                write_feature_file(dset, features_dir / src.name)

        params = {"extractor": "imported", "source": str(source)}
        inputs = [patches_dir, source]
    else:

        def produce():
            features_dir.mkdir(parents=True, exist_ok=True)
            tasks = [
                (patches_dir, features_dir, record, cfg.baseline_grid)
                for record in read_manifest(patches_dir)
            ]
            if cfg.jobs > 1:
                with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                    list(pool.map(_extract_one_set, tasks))
            else:
                for task in tasks:
                    _extract_one_set(task)

        params = {"extractor": "baseline", "baseline_grid": cfg.baseline_grid}
        inputs = [patches_dir]

    runner.run("features", params, inputs=inputs, produce=produce, outputs=[features_dir])


def load_feature_sets(features_dir: Path) -> list[DescriptorSet]:
    paths = sorted(features_dir.glob("*.pbfv"))
    if not paths:
        raise MissingArtifactError(features_dir, "features")
    return [read_feature_file(p) for p in paths]


# ---------------------------------------------------------------- vocab / encode


def stage_vocab(runner: StageRunner) -> None:
    cfg = runner.config
    features_dir = runner.workdir / "features"
    vocab_dir = runner.workdir / "vocab"
    seed = derive_seed(cfg.seed, "vocab")

    def produce():
        vocab_dir.mkdir(parents=True, exist_ok=True)
        sets = load_feature_sets(features_dir)
        _, codebooks = bovw.build_and_encode(
            sets, cfg.scope, cfg.k, cfg.trim_fraction, seed
        )
        for name, cb in sorted(codebooks.items()):
            filename = "global.pbcb" if name == "*" else f"{name}.pbcb"
            bovw.write_codebook(cb, vocab_dir / filename)

    runner.run(
        "vocab",
        {"k": cfg.k, "trim_fraction": cfg.trim_fraction, "scope": cfg.vocab_scope, "seed": seed},
        inputs=[features_dir],
        produce=produce,
        outputs=[vocab_dir],
    )


def stage_encode(runner: StageRunner) -> None:
    cfg = runner.config
    features_dir = runner.workdir / "features"
    vocab_dir = runner.workdir / "vocab"
    encoded_dir = runner.workdir / "encoded"

    def produce():
        encoded_dir.mkdir(parents=True, exist_ok=True)
        sets = load_feature_sets(features_dir)
        blocks, labels, provenance = [], [], []
        for dset in sets:
            if cfg.scope is bovw.VocabScope.GLOBAL:
                cb_path = vocab_dir / "global.pbcb"
            else:
                cb_path = vocab_dir / f"{dset.region_id}.pbcb"
            if not cb_path.exists():
                raise MissingArtifactError(cb_path, "vocab")
            cb = bovw.read_codebook(cb_path)
            blocks.append(bovw.encode_set(dset, cb))
            labels.extend([int(dset.label)] * dset.n_patches)
            provenance.extend((dset.region_id, i) for i in range(dset.n_patches))
        table = bovw.EncodedTable(
            rows=np.concatenate(blocks, axis=0),
            labels=np.asarray(labels, dtype=np.int64),
            provenance=provenance,
        )
        bovw.write_table_csv(table, encoded_dir / "table.csv")

    runner.run(
        "encode",
        {"scope": cfg.vocab_scope, "k": cfg.k},
        inputs=[features_dir, vocab_dir],
        produce=produce,
        outputs=[encoded_dir],
    )


# ---------------------------------------------------------------- train / crossval


def stage_train(runner: StageRunner) -> None:
    cfg = runner.config
    table_path = runner.workdir / "encoded" / "table.csv"
    model_dir = runner.workdir / "model"
    seed = derive_seed(cfg.seed, "train")

    def produce():
        model_dir.mkdir(parents=True, exist_ok=True)
        table = bovw.read_table_csv(table_path)
        model = classifier.train_mlp(table.rows, table.labels, cfg.train_config(seed))
        classifier.write_model(model, model_dir / "mlp.pbml")

    runner.run(
        "train",
        {
            "hidden": cfg.hidden, "l2": cfg.l2, "learning_rate": cfg.learning_rate,
            "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": seed,
        },
        inputs=[table_path],
        produce=produce,
        outputs=[model_dir],
    )


def stage_crossval(runner: StageRunner, prefix: str = "") -> evaluation.MetricsReport | None:
    cfg = runner.config
    features_dir = runner.workdir / "features"
    reports_dir = runner.workdir / "reports"
    seed = derive_seed(cfg.seed, "crossval")
    holder: dict = {}

    def produce():
        sets = load_feature_sets(features_dir)
        report = evaluation.cross_validate_sets(
            sets,
            folds=cfg.folds,
            seed=seed,
            scope=cfg.scope,
            k=cfg.k,
            fraction=cfg.trim_fraction,
            train_config=cfg.train_config(0),
            use_stderr=cfg.use_stderr,
        )
        evaluation.write_report(report, reports_dir, prefix)
        if not runner.quiet:
            print(evaluation.format_report(report, title=f"crossval {prefix or cfg.dataset}"))
        holder["report"] = report

    runner.run(
        f"crossval{('-' + prefix.rstrip('_')) if prefix else ''}",
        {
            "folds": cfg.folds, "seed": seed, "scope": cfg.vocab_scope, "k": cfg.k,
            "trim_fraction": cfg.trim_fraction, "hidden": cfg.hidden, "l2": cfg.l2,
            "learning_rate": cfg.learning_rate, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "use_stderr": cfg.use_stderr,
        },
        inputs=[features_dir],
        produce=produce,
        outputs=[reports_dir],
    )
    return holder.get("report")


# ---------------------------------------------------------------- experiments


def _sub_config(cfg: PipelineConfig, **changes) -> PipelineConfig:
    from dataclasses import replace

    return replace(cfg, **changes)


def run_pipeline(runner: StageRunner) -> None:
    cfg = runner.config
    if cfg.dataset == "ds2":
        stage_extract_regions(runner)
    stage_tile(runner)
    stage_features(runner)
    stage_crossval(runner)


def run_experiment(config: PipelineConfig, preset: str, quiet: bool = False) -> dict:
    """The three experiment presets.

    exp1-ds1 / exp1-ds2: one dataset, full pipeline + CV.
    exp2-merged: both datasets tiled and described separately, feature sets
    merged into one CV run.
    exp3-scales: the WSI pipeline at scales 0, 1, 2 with one report each and
    a per-scale sample-count summary.
    """
    if preset in ("exp1-ds1", "exp1-ds2"):
        dataset = "ds1" if preset.endswith("ds1") else "ds2"
        runner = StageRunner(_sub_config(config, dataset=dataset), quiet=quiet)
        run_pipeline(runner)
        return {"workdir": str(runner.workdir)}

    if preset == "exp2-merged":
        sub1 = StageRunner(
            _sub_config(config, dataset="ds1", workdir=config.workdir / "ds1"), quiet=quiet
        )
        run_pipeline_features_only(sub1)
        sub2 = StageRunner(
            _sub_config(config, dataset="ds2", workdir=config.workdir / "ds2"), quiet=quiet
        )
        run_pipeline_features_only(sub2)

        merged = StageRunner(config, quiet=quiet)
        features_dir = config.workdir / "features"

        def produce():
            features_dir.mkdir(parents=True, exist_ok=True)
            for sub in (sub1, sub2):
                for src in sorted((sub.workdir / "features").glob("*.pbfv")):
                    (features_dir / src.name).write_bytes(src.read_bytes())

        merged.run(
            "merge-features",
            {"sources": "ds1+ds2"},
            inputs=[sub1.workdir / "features", sub2.workdir / "features"],
            produce=produce,
            outputs=[features_dir],
        )
        stage_crossval(merged, prefix="merged_")
        return {"workdir": str(config.workdir)}

    if preset == "exp3-scales":
        totals = []
        for scale in (0, 1, 2):
            sub = StageRunner(
                _sub_config(config, dataset="ds2", scale=scale,
                            workdir=config.workdir / f"scale{scale}"),
                quiet=quiet,
            )
            run_pipeline_features_only(sub)
            stage_crossval(sub, prefix=f"scale{scale}_")
            manifest = read_manifest(sub.workdir / "patches")
            totals.append(
                {
                    "scale": scale,
                    "n_regions": len(manifest),
                    "n_patches": sum(r["n_patches"] for r in manifest),
                }
            )
        config.workdir.mkdir(parents=True, exist_ok=True)
        with open(config.workdir / "scale_totals.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["scale", "n_regions", "n_patches"])
            writer.writeheader()
            writer.writerows(totals)
        return {"workdir": str(config.workdir), "totals": totals}

    raise ValueError(
        f"unknown experiment preset {preset!r}; expected exp1-ds1, exp1-ds2, "
        "exp2-merged or exp3-scales"
    )


def run_pipeline_features_only(runner: StageRunner) -> None:
    cfg = runner.config
    if cfg.dataset == "ds2":
        stage_extract_regions(runner)
    stage_tile(runner)
    stage_features(runner)
