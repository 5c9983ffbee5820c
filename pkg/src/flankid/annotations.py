"""Pascal-VOC (labelImg) annotations plus the manifests and splits built from them."""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

DISJOINT_INDIVIDUAL = "disjoint_individual"
PER_INDIVIDUAL_STRATIFIED = "per_individual_stratified"


class AnnotationError(ValueError):
    """Base class for annotation and manifest problems."""


class MalformedXMLError(AnnotationError):
    pass


class MissingElementError(AnnotationError):
    pass


class InvertedBoxError(AnnotationError):
    pass


class BoxOutOfBoundsError(AnnotationError):
    pass


class DuplicateImageError(AnnotationError):
    pass


class UnknownImageError(AnnotationError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledBox:
    label: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if min(self.x_min, self.y_min) < 0:
            raise BoxOutOfBoundsError(f"negative coordinate in {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvertedBoxError(f"inverted or empty box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class ImageRecord:
    image_id: str
    path: str
    species: str = ""
    individual_id: str | None = None
    boxes: list[LabeledBox] = field(default_factory=list)
    capture_meta: dict[str, str] = field(default_factory=dict)
    width: int | None = None
    height: int | None = None
    depth: int | None = None

    def boxes_with_label(self, label: str) -> list[LabeledBox]:
        return [b for b in self.boxes if b.label == label]


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    species: str = ""

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise DuplicateImageError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)

    @property
    def individuals(self) -> set[str]:
        return {r.individual_id for r in self.records if r.individual_id is not None}

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}

    def subset(self, image_ids: Iterable[str]) -> "DatasetManifest":
        index = self.by_id()
        return DatasetManifest([index[i] for i in image_ids], self.species)


@dataclass
class SplitSpec:
    seed: int
    train_fraction: float
    train_ids: list[str]
    test_ids: list[str]
    mode: str
    excluded_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise SplitError("train and test ids overlap")


# ---------------------------------------------------------------------------
# VOC XML


def _text(node: ET.Element, tag: str, path) -> str:
    child = node.find(tag)
    if child is None or child.text is None or not child.text.strip():
        raise MissingElementError(f"{path}: missing <{tag}>")
    return child.text.strip()


def _number(node: ET.Element, tag: str, path) -> float:
    raw = _text(node, tag, path)
    try:
        value = float(raw)
    except ValueError as exc:
        raise MalformedXMLError(f"{path}: <{tag}> is not numeric: {raw!r}") from exc
    return int(value) if value.is_integer() else value


def parse_voc_xml(path: str | Path, species: str = "") -> ImageRecord:
    """Read one labelImg annotation file.

    ``image_id`` is the stem of the ``<filename>`` element. Optional
    ``<species>``, ``<individual>`` and ``<meta>`` elements (written by
    :func:`write_voc_xml`) are honoured when present.
    """
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise MalformedXMLError(f"{path}: {exc}") from exc
    if root.tag != "annotation":
        raise MalformedXMLError(f"{path}: root element is <{root.tag}>, expected <annotation>")

    filename = _text(root, "filename", path)
    path_node = root.find("path")
    image_path = path_node.text.strip() if path_node is not None and path_node.text else filename

    width = height = depth = None
    size = root.find("size")
    if size is not None:
        width = int(_number(size, "width", path))
        height = int(_number(size, "height", path))
        if size.find("depth") is not None:
            depth = int(_number(size, "depth", path))

    boxes = []
    for obj in root.findall("object"):
        label = _text(obj, "name", path)
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MissingElementError(f"{path}: object {label!r} has no <bndbox>")
        coords = [_number(bnd, t, path) for t in ("xmin", "ymin", "xmax", "ymax")]
        if coords[0] >= coords[2] or coords[1] >= coords[3]:
            raise InvertedBoxError(f"{path}: inverted box for {label!r}: {coords}")
        box = LabeledBox(label, *coords)
        if width is not None and height is not None and (box.x_max > width or box.y_max > height):
            raise BoxOutOfBoundsError(f"{path}: box {coords} outside {width}x{height}")
        boxes.append(box)

    sp = root.find("species")
    ind = root.find("individual")
    meta = {}
    meta_node = root.find("meta")
    if meta_node is not None:
        for item in meta_node.findall("item"):
            meta[item.get("key", "")] = item.text or ""
    return ImageRecord(
        image_id=Path(filename).stem,
        path=image_path,
        species=sp.text.strip() if sp is not None and sp.text else species,
        individual_id=ind.text.strip() if ind is not None and ind.text else None,
        boxes=boxes,
        capture_meta=meta,
        width=width,
        height=height,
        depth=depth,
    )


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_voc_xml(record: ImageRecord, path: str | Path, filename: str | None = None) -> None:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename or record.image_id + Path(record.path).suffix
    ET.SubElement(root, "path").text = record.path
    if record.width is not None and record.height is not None:
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(record.width)
        ET.SubElement(size, "height").text = str(record.height)
        if record.depth is not None:
            ET.SubElement(size, "depth").text = str(record.depth)
    if record.species:
        ET.SubElement(root, "species").text = record.species
    if record.individual_id is not None:
        ET.SubElement(root, "individual").text = record.individual_id
    if record.capture_meta:
        meta = ET.SubElement(root, "meta")
        for key in sorted(record.capture_meta):
            ET.SubElement(meta, "item", key=key).text = record.capture_meta[key]
    for box in record.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = box.label
        bnd = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), box.coords()):
            ET.SubElement(bnd, tag).text = _fmt(v)
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


# ---------------------------------------------------------------------------
# manifests


def read_identity_table(path: str | Path) -> dict[str, str]:
    """Parse ``image_id<TAB>individual_id`` lines; ``#`` starts a comment."""
    table: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise AnnotationError(f"{path}:{lineno}: expected 'image_id<TAB>individual_id'")
        image_id, ident = parts[0].strip(), parts[1].strip()
        if image_id in table:
            raise DuplicateImageError(f"{path}:{lineno}: image_id {image_id!r} listed twice")
        table[image_id] = ident
    return table


def build_manifest(annotation_dir: str | Path, identity_table: str | Path | None = None,
                   species: str = "", exclude: Iterable[str] = ()) -> DatasetManifest:
    annotation_dir = Path(annotation_dir)
    excluded = set(exclude)
    records: list[ImageRecord] = []
    owner: dict[str, Path] = {}
    for xml_path in sorted(annotation_dir.glob("*.xml")):
        rec = parse_voc_xml(xml_path, species=species)
        if rec.image_id in owner:
            raise DuplicateImageError(
                f"duplicate image_id {rec.image_id!r} in {owner[rec.image_id].name} and {xml_path.name}")
        owner[rec.image_id] = xml_path
        if rec.image_id in excluded:
            continue
        if not Path(rec.path).is_absolute():
            rec.path = str((annotation_dir / rec.path).resolve())
        records.append(rec)
    if identity_table is not None:
        table = read_identity_table(identity_table)
        index = {r.image_id: r for r in records}
        for image_id, ident in table.items():
            if image_id in excluded:
                continue
            if image_id not in index:
                raise UnknownImageError(f"identity table references unknown image {image_id!r}")
            index[image_id].individual_id = ident
    return DatasetManifest(records, species)


def _record_to_dict(r: ImageRecord) -> dict:
    d = asdict(r)
    d["boxes"] = [asdict(b) for b in r.boxes]
    return d


def _record_from_dict(d: dict) -> ImageRecord:
    d = dict(d)
    d["boxes"] = [LabeledBox(**b) for b in d.get("boxes", [])]
    return ImageRecord(**d)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    payload = {
        "species": manifest.species,
        "individuals": sorted(manifest.individuals),
        "records": [_record_to_dict(r) for r in manifest.records],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetManifest([_record_from_dict(d) for d in payload["records"]], payload.get("species", ""))


def save_splits(splits: list[SplitSpec], path: str | Path) -> None:
    payload = [asdict(s) for s in splits]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_splits(path: str | Path) -> list[SplitSpec]:
    return [SplitSpec(**d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


# ---------------------------------------------------------------------------
# splits


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _group_by_individual(manifest: DatasetManifest) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = defaultdict(list)
    for r in manifest.records:
        if r.individual_id is None:
            raise SplitError(f"record {r.image_id!r} has no individual_id")
        groups[r.individual_id].append(r.image_id)
    return groups


def make_detection_split(manifest: DatasetManifest, train_fraction: float = 0.75,
                         seed: int = 0) -> SplitSpec:
    """Split whole individuals between train and test.

    Individuals are put in a canonical order (descending image count, then
    identity) and shuffled by ``seed``; they join the training side in that
    order until its image count reaches ``round(train_fraction * total)``.
    At least one individual always stays on the test side.
    """
    if not 0 < train_fraction < 1:
        raise SplitError("train_fraction must lie in (0, 1)")
    groups = _group_by_individual(manifest)
    if len(groups) < 2:
        raise SplitError("need at least 2 individuals for a disjoint split")
    canonical = sorted(groups, key=lambda k: (-len(groups[k]), k))
    order = [canonical[i] for i in np.random.default_rng(seed).permutation(len(canonical))]
    target = round_half_up(train_fraction * len(manifest.records))
    train_inds: list[str] = []
    count = 0
    for ident in order[:-1]:
        if count >= target:
            break
        train_inds.append(ident)
        count += len(groups[ident])
    chosen = set(train_inds)
    train_ids = [r.image_id for r in manifest.records if r.individual_id in chosen]
    test_ids = [r.image_id for r in manifest.records if r.individual_id not in chosen]
    return SplitSpec(seed, train_fraction, train_ids, test_ids, DISJOINT_INDIVIDUAL)


def derive_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def make_reid_splits(manifest: DatasetManifest, n_splits: int = 5, train_fraction: float = 0.75,
                     seed: int = 0) -> list[SplitSpec]:
    """Per-individual stratified random splits for recognition.

    Each individual with ``m >= 2`` images sends ``round(train_fraction * m)``
    images to train, clamped so both sides get at least one. Individuals with
    a single image are excluded and logged.
    """
    if n_splits < 1:
        raise SplitError("n_splits must be >= 1")
    if not manifest.records:
        raise SplitError("empty manifest")
    if not 0 < train_fraction < 1:
        raise SplitError("train_fraction must lie in (0, 1)")
    groups = _group_by_individual(manifest)
    excluded = sorted(i for ident, ids in groups.items() if len(ids) < 2 for i in ids)
    for ident, ids in sorted(groups.items()):
        if len(ids) < 2:
            log.warning("excluding individual %s from recognition splits: only one image", ident)
    eligible = {k: v for k, v in groups.items() if len(v) >= 2}
    if not eligible:
        raise SplitError("no individual has two or more images")

    splits = []
    for split_seed in derive_seeds(seed, n_splits):
        rng = np.random.default_rng(split_seed)
        train: set[str] = set()
        for ident in sorted(eligible):
            ids = eligible[ident]
            n_train = min(max(round_half_up(train_fraction * len(ids)), 1), len(ids) - 1)
            picked = rng.permutation(len(ids))[:n_train]
            train.update(ids[j] for j in picked)
        order = [r.image_id for r in manifest.records if r.individual_id in eligible]
        splits.append(SplitSpec(
            seed=split_seed,
            train_fraction=train_fraction,
            train_ids=[i for i in order if i in train],
            test_ids=[i for i in order if i not in train],
            mode=PER_INDIVIDUAL_STRATIFIED,
            excluded_ids=excluded,
        ))
    return splits
