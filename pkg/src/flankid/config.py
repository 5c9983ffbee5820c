"""Pipeline configuration: a YAML file of defaults plus per-species presets."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .imaging import AugmentationPlan

DEFAULT_CONFIG = Path(__file__).with_name("data") / "default.yaml"
GROUND_TRUTH, DETECTOR = "ground_truth", "detector"
WORKERS_ENV = "FLANKID_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    species: str = "tiger"
    flank_resize: tuple[int, int] = (256, 192)  # (width, height)
    net_spec: str | None = None
    weights: str | None = None
    pca_energy: float = 0.99
    C: float | None = None
    C_grid: tuple[float, ...] = (1e-2, 1e0, 1e2, 1e4, 1e5, 1e6)
    grid_folds: int = 3
    nms_threshold: float = 0.3
    min_score: float = 0.8
    match_iou: float = 0.5
    flank_overlap: float = 0.7
    sweep_thresholds: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    n_splits: int = 5
    train_fraction: float = 0.75
    max_rank: int = 5
    crop_source: str = GROUND_TRUTH
    seed: int | None = None
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "flank_resize", tuple(int(v) for v in self.flank_resize))
        object.__setattr__(self, "C_grid", tuple(float(v) for v in self.C_grid))
        object.__setattr__(self, "sweep_thresholds", tuple(float(v) for v in self.sweep_thresholds))
        if self.C is not None:
            object.__setattr__(self, "C", float(self.C))
        for name in ("pca_energy", "train_fraction", "min_score", "nms_threshold", "match_iou", "flank_overlap"):
            v = float(getattr(self, name))
            if not 0 < v <= 1 and not (name == "min_score" and v == 0):
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
            object.__setattr__(self, name, v)
        if len(self.flank_resize) != 2 or min(self.flank_resize) < 1:
            raise ConfigError(f"flank_resize must be two positive ints, got {self.flank_resize}")
        if any(c <= 0 for c in self.C_grid) or (self.C is not None and self.C <= 0):
            raise ConfigError("C values must be positive")
        if self.C is None and not self.C_grid:
            raise ConfigError("need either C or a nonempty C_grid")
        if self.crop_source not in (GROUND_TRUTH, DETECTOR):
            raise ConfigError(f"crop_source must be {GROUND_TRUTH!r} or {DETECTOR!r}")
        if self.n_splits < 1 or self.max_rank < 1 or self.grid_folds < 2:
            raise ConfigError("n_splits and max_rank must be >= 1, grid_folds >= 2")

    def augmentation_plan(self, seed: int) -> AugmentationPlan:
        return AugmentationPlan(seed=seed, **self.augmentation)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else (base / p).resolve())


def load_config(path: str | Path | None = None, species: str = "tiger", overrides: dict | None = None
                ) -> PipelineConfig:
    """Merge ``defaults``, the ``species`` section and ``overrides`` (highest)."""
    path = Path(path) if path else DEFAULT_CONFIG
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    presets = raw.get("species", {}) or {}
    if species not in presets:
        raise ConfigError(f"{path}: no preset for species {species!r} (have {sorted(presets)})")
    merged = {**(raw.get("defaults") or {}), **presets[species], "species": species}
    base = path.parent
    for key in ("net_spec", "weights"):
        merged[key] = _resolve(base, merged.get(key))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return PipelineConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def with_overrides(config: PipelineConfig, **kw) -> PipelineConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
