"""End-to-end recognition protocol over repeated train/test splits."""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn
from .annotations import DatasetManifest, ImageRecord, SplitSpec, make_reid_splits, save_splits
from .classifier import (IdentModel, grid_search, load_ident_model, predict_ranked_batch, save_ident_model,
                         train)
from .config import DETECTOR, PipelineConfig, worker_count
from .detection import (EXPERT_REVIEW, FLANK, FLANK_READY, Detection, DetectorOutput, RoutingDecision,
                        postprocess, route)
from .dimred import PCAModel, load_pca, pca_fit, pca_transform, save_pca
from .evaluation import CMCCurve, aggregate_splits, cmc_curve, emit_report, write_report_data
from .imaging import ImageBuffer, augment_recognition_set, crop, load_image, resize_bilinear, to_rgb

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class LeakageLog:
    entries: list[dict] = field(default_factory=list)

    def record(self, split: int | str, stage: str, image_ids):
        self.entries.append({"split": split, "stage": stage, "image_ids": sorted(set(image_ids))})

    def touched(self, split, stages) -> set[str]:
        return {i for e in self.entries if e["split"] == split and e["stage"] in stages for i in e["image_ids"]}

    def write(self, path: Path):
        path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries), encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "LeakageLog":
        return cls([json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line])


TRAIN_STAGES = ("augment", "feature_train", "pca_fit", "classifier_fit")


@dataclass
class FeatureExtractor:
    spec: cnn.ConvNetSpec
    weights: dict
    workers: int = 1

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "FeatureExtractor":
        if not config.net_spec:
            raise ValueError("config has no net_spec")
        if not config.weights or not Path(config.weights).is_file():
            raise FileNotFoundError(f"weights file not found: {config.weights}")
        w, h = config.flank_resize
        spec = cnn.load_spec(config.net_spec).with_input(h, w)
        weights = cnn.load_weights(config.weights)
        cnn.check_weights(spec, weights)
        cnn.output_shape(spec)
        return cls(spec, weights, worker_count())

    def __call__(self, images: list[ImageBuffer]) -> np.ndarray:
        def one(img):
            return cnn.extract_features(img, self.spec, self.weights).values
        if self.workers > 1 and len(images) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                rows = list(pool.map(one, images))
        else:
            rows = [one(img) for img in images]
        return np.vstack(rows)


def ground_truth_output(record: ImageRecord) -> DetectorOutput:
    return DetectorOutput(record.image_id, [Detection(b, 1.0) for b in record.boxes])


def route_records(records: list[ImageRecord], config: PipelineConfig,
                  raw: dict[str, DetectorOutput] | None = None) -> dict[str, RoutingDecision]:
    """Routing per image from detector proposals, or from ground truth when ``raw`` is None."""
    out = {}
    for rec in records:
        src = (raw.get(rec.image_id, DetectorOutput(rec.image_id)) if raw is not None
               else ground_truth_output(rec))
        processed = postprocess(src, 0.0 if raw is None else config.min_score, config.nms_threshold)
        out[rec.image_id] = route(processed, config.flank_overlap)
    return out


def flank_box(record: ImageRecord, decision: RoutingDecision, config: PipelineConfig):
    if config.crop_source == DETECTOR:
        return decision.selected_flank.box if decision.status == FLANK_READY else None
    flanks = record.boxes_with_label(FLANK)
    return max(flanks, key=lambda b: (b.area, b.coords())) if flanks else None


def prepare_flank(img: ImageBuffer, box, config: PipelineConfig) -> ImageBuffer:
    w, h = config.flank_resize
    img = to_rgb(img)
    if box is not None:
        img = crop(img, box)
    return resize_bilinear(img, w, h)


@dataclass
class SplitResult:
    index: int
    seed: int
    C: float
    k: int
    rank1: float
    cmc: CMCCurve
    n_train: int
    n_test: int


@dataclass
class ReidResult:
    splits: list[SplitResult]
    rank1_mean: float
    rank1_std: float
    expert_queue: list[str]
    out_dir: Path


def fit_recognizer(images: list[ImageBuffer], labels: list[str], ids: list[str], config: PipelineConfig,
                   extract: FeatureExtractor, seed: int, leakage: LeakageLog, split) -> tuple[PCAModel, IdentModel]:
    with _stage("augment"):
        augmented = augment_recognition_set(images, config.augmentation_plan(seed))
        aug_labels = [lab for lab in labels for _ in range(3)]
        aug_groups = [i for i in ids for _ in range(3)]
        leakage.record(split, "augment", ids)
    with _stage("feature_extraction"):
        X = extract(augmented)
        leakage.record(split, "feature_train", ids)
    with _stage("pca_fit"):
        pca = pca_fit(X, config.pca_energy)
        Z = pca_transform(pca, X)
        leakage.record(split, "pca_fit", ids)
    with _stage("classifier_fit"):
        C = config.C
        if C is None:
            C, _ = grid_search(Z, aug_labels, config.C_grid, config.grid_folds, seed, groups=aug_groups)
        model = train(Z, aug_labels, C)
        leakage.record(split, "classifier_fit", ids)
    return pca, model


def run_reid(manifest: DatasetManifest, config: PipelineConfig, out_dir: str | Path,
             raw_detections: list[DetectorOutput] | None = None) -> ReidResult:
    """Run the split protocol and write reports, models and the expert queue.

    Outputs are staged in a sibling directory and moved into ``out_dir`` only
    on success, so a failed run leaves nothing behind.
    """
    if config.seed is None:
        raise ValueError("run_reid requires an explicit seed")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"output directory {out_dir} is not empty")
    staging = out_dir.with_name(f".{out_dir.name}.partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        result = _run_reid(manifest, config, staging, raw_detections)
        if out_dir.exists():
            out_dir.rmdir()
        staging.rename(out_dir)
        result.out_dir = out_dir
        return result
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


def _run_reid(manifest, config, out, raw_detections) -> ReidResult:
    with _stage("load_models"):
        extract = FeatureExtractor.from_config(config)
    raw = None if raw_detections is None else {o.image_id: o for o in raw_detections}
    with _stage("routing"):
        decisions = route_records(manifest.records, config, raw)
    expert = sorted(i for i, d in decisions.items() if d.status == EXPERT_REVIEW)
    (out / "expert_queue.txt").write_text("".join(f"{i}\n" for i in expert), encoding="utf-8")
    (out / "routing.tsv").write_text(
        "image_id\tstatus\n" + "".join(f"{i}\t{decisions[i].status}\n" for i in sorted(decisions)),
        encoding="utf-8")

    with _stage("crop"):
        flanks: dict[str, ImageBuffer] = {}
        for rec in manifest.records:
            box = flank_box(rec, decisions[rec.image_id], config)
            if box is None or rec.individual_id is None:
                continue
            flanks[rec.image_id] = prepare_flank(load_image(rec.path), box, config)
    eligible = DatasetManifest([r for r in manifest.records if r.image_id in flanks], manifest.species)
    with _stage("split"):
        splits = make_reid_splits(eligible, config.n_splits, config.train_fraction, config.seed)
    save_splits(splits, out / "splits.json")
    ident = {r.image_id: r.individual_id for r in eligible.records}

    leakage = LeakageLog()
    results = []
    for s, split in enumerate(splits):
        log.info("split %d: %d train / %d test", s, len(split.train_ids), len(split.test_ids))
        pca, model = fit_recognizer([flanks[i] for i in split.train_ids], [ident[i] for i in split.train_ids],
                                    split.train_ids, config, extract, split.seed, leakage, s)
        with _stage("evaluate"):
            Xte = extract([flanks[i] for i in split.test_ids])
            preds = predict_ranked_batch(model, pca_transform(pca, Xte))
            truth = [ident[i] for i in split.test_ids]
            curve = cmc_curve(preds, truth, min(config.max_rank, len(model.classes)))
            leakage.record(s, "evaluate", split.test_ids)
        results.append(SplitResult(s, split.seed, model.C, pca.k, curve.at(1), curve,
                                   len(split.train_ids), len(split.test_ids)))
        leaked = leakage.touched(s, TRAIN_STAGES) & set(split.test_ids)
        if leaked:
            raise StageError("audit", RuntimeError(f"test images used in training: {sorted(leaked)[:5]}"))

    with _stage("final_model"):
        all_ids = [r.image_id for r in eligible.records]
        pca, model = fit_recognizer([flanks[i] for i in all_ids], [ident[i] for i in all_ids], all_ids,
                                    config, extract, config.seed, leakage, "final")
        save_model(out / "model", config, extract.spec, pca, model)
    leakage.write(out / "leakage.jsonl")

    with _stage("report"):
        summary = _write_reports(out, config, results, splits)
    return ReidResult(results, summary["rank1_mean"], summary["rank1_std"], expert, out)


def _write_reports(out: Path, config: PipelineConfig, results: list[SplitResult], splits: list[SplitSpec]) -> dict:
    params = {"species": config.species, "crop_source": config.crop_source, "seed": config.seed,
              "n_splits": config.n_splits, "pca_energy": config.pca_energy}
    if len(results) >= 2:
        agg = aggregate_splits([r.rank1 for r in results])
        mean, std = agg.mean, agg.std
        emit_report(agg, out / "rank1.tsv", params=params)
    else:
        mean, std = results[0].rank1, 0.0
    n_ranks = min(len(r.cmc.accuracies) for r in results)
    mean_curve = CMCCurve([float(np.mean([r.cmc.accuracies[j] for r in results])) for j in range(n_ranks)])
    emit_report(mean_curve, out / "cmc.tsv", params=params)
    write_report_data({
        "meta": {"tool": "flankid", "report": "cmc_splits", **{k: str(v) for k, v in params.items()}},
        "columns": ["rank", *(f"split{r.index}" for r in results), "mean"],
        "rows": [[str(j + 1), *(f"{r.cmc.accuracies[j]:.4f}" for r in results), f"{mean_curve.accuracies[j]:.4f}"]
                 for j in range(n_ranks)],
    }, out / "cmc_splits.tsv", "tsv")
    summary = {
        "config": config.to_dict(),
        "rank1_mean": mean,
        "rank1_std": std,
        "splits": [{"index": r.index, "seed": r.seed, "C": r.C, "pca_k": r.k, "rank1": r.rank1,
                    "cmc": r.cmc.accuracies, "n_train": r.n_train, "n_test": r.n_test,
                    "n_train_augmented": 3 * r.n_train} for r in results],
        "excluded_ids": splits[0].excluded_ids,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# trained artefacts


def save_model(model_dir: Path, config: PipelineConfig, spec: cnn.ConvNetSpec, pca: PCAModel,
               ident: IdentModel) -> None:
    model_dir.mkdir(parents=True, exist_ok=True)
    cnn.save_spec(spec, model_dir / "net_spec.yaml")
    shutil.copyfile(config.weights, model_dir / "weights.ntc")
    save_pca(pca, model_dir / "pca.ntc")
    save_ident_model(ident, model_dir / "classifier.ntc", model_dir / "classes.txt")
    meta = {"species": config.species, "flank_resize": list(config.flank_resize), "C": ident.C,
            "pca_k": pca.k, "crop_source": config.crop_source}
    (model_dir / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class LoadedModel:
    spec: cnn.ConvNetSpec
    weights: dict
    pca: PCAModel
    ident: IdentModel
    flank_resize: tuple[int, int]

    def identify(self, img: ImageBuffer, box=None):
        w, h = self.flank_resize
        if (self.spec.input[0], self.spec.input[1]) != (h, w):
            raise cnn.ShapeError(f"model net expects {self.spec.input[1]}x{self.spec.input[0]}, flank size is {w}x{h}")
        img = to_rgb(img)
        if box is not None:
            img = crop(img, box)
        feats = cnn.extract_features(resize_bilinear(img, w, h), self.spec, self.weights).values
        return predict_ranked_batch(self.ident, pca_transform(self.pca, feats[None, :]))[0]


def load_model(model_dir: str | Path) -> LoadedModel:
    model_dir = Path(model_dir)
    if not (model_dir / "model.json").is_file():
        raise FileNotFoundError(f"no trained model in {model_dir}")
    meta = json.loads((model_dir / "model.json").read_text(encoding="utf-8"))
    return LoadedModel(
        spec=cnn.load_spec(model_dir / "net_spec.yaml"),
        weights=cnn.load_weights(model_dir / "weights.ntc"),
        pca=load_pca(model_dir / "pca.ntc"),
        ident=load_ident_model(model_dir / "classifier.ntc", model_dir / "classes.txt"),
        flank_resize=tuple(meta["flank_resize"]),
    )
