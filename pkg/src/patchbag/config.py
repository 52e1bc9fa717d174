"""Pipeline configuration: a flat dataclass mirrored one-to-one by the
key = value config file format. Every stage records its effective parameters
in the run manifest, and all stage seeds derive from the single master seed
by stage-name hashing."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .bovw import VocabScope
from .classifier import TrainConfig
from .tiler import ScanOrder


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    workdir: Path = Path("run")
    dataset: str = "ds2"  # ds1 (microscopy folders) | ds2 (slides + annotations)
    ds1_root: Path | None = None
    ds2_root: Path | None = None
    scale: int = 0
    scan_order: str = "raster"  # raster | serpentine
    background_threshold: float = 0.2  # max background fraction per patch
    extractor: str = "baseline"  # baseline | imported
    baseline_grid: int = 4
    features_dir: Path | None = None  # source of .pbfv files when imported
    k: int = 100
    trim_fraction: float = 0.8
    vocab_scope: str = "region"  # region | global
    hidden: int = 100
    l2: float = 0.2
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    folds: int = 5
    seed: int = 42
    jobs: int = 1
    normal_per_slide: int = 2
    normal_region_size: int = 512
    max_region_pixels: int = 2**30
    tissue_threshold: float = 0.8
    background_rgb: float = 230.0
    use_stderr: bool = False

    def __post_init__(self):
        for name in ("workdir", "ds1_root", "ds2_root", "features_dir"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))
        if self.dataset not in ("ds1", "ds2"):
            raise ConfigError(f"dataset must be ds1 or ds2, got {self.dataset!r}")
        if self.scale not in (0, 1, 2):
            raise ConfigError(f"scale must be 0, 1 or 2, got {self.scale}")
        self.order  # validates scan_order
        self.scope  # validates vocab_scope
        if self.extractor not in ("baseline", "imported"):
            raise ConfigError(f"extractor must be baseline or imported, got {self.extractor!r}")

    @property
    def order(self) -> ScanOrder:
        try:
            return ScanOrder(self.scan_order)
        except ValueError:
            raise ConfigError(
                f"scan_order must be raster or serpentine, got {self.scan_order!r}"
            ) from None

    @property
    def scope(self) -> VocabScope:
        try:
            return VocabScope(self.vocab_scope)
        except ValueError:
            raise ConfigError(
                f"vocab_scope must be region or global, got {self.vocab_scope!r}"
            ) from None

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            hidden=self.hidden,
            l2=self.l2,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
        )

    def snapshot(self) -> dict:
        """Parameter snapshot for manifests: every field, stringified."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = str(value) if value is not None else ""
        return out


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Read the flat key = value file; later keys win; # starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()

    valid = {f.name: f for f in fields(PipelineConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in valid:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        kwargs[key] = _coerce(valid[key].type, value, key)
    if overrides:
        kwargs.update(overrides)
    return PipelineConfig(**kwargs)


def _coerce(type_name, value: str, key: str):
    t = str(type_name)
    if value == "" or value.lower() == "none":
        return None
    if "bool" in t:
        try:
            return _BOOL[value.lower()]
        except KeyError:
            raise ConfigError(f"{key}: expected a boolean, got {value!r}") from None
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    if "Path" in t:
        return Path(value)
    return value


def write_config(config: PipelineConfig, path: str | Path) -> None:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {'' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n")
