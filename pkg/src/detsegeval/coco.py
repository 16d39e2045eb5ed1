"""Loading, validation and serialization of COCO-style ground truth and
prediction files.

This is the trust boundary of the package: everything downstream assumes
the invariants enforced here (referential integrity, score ranges,
non-degenerate payloads, a single category).  Ground-truth loading is
always strict and raises on the first problem; prediction loading can run
in lenient mode, where offending instances are dropped and reported
instead of aborting the run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    DegenerateRingError,
    DuplicateImageIdError,
    MalformedJsonError,
    MissingFieldError,
    MultipleCategoriesError,
    SubmissionError,
    UnknownImageRefError,
)
from .geometry import BBox, PolygonSet, polygon_area, rasterize

DETECTION = "detection"
SEGMENTATION = "segmentation"
TASKS = (DETECTION, SEGMENTATION)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class GroundTruthInstance:
    id: int
    image_id: int
    bbox: BBox
    segmentation: PolygonSet
    category_id: int


@dataclass(frozen=True)
class PredictionInstance:
    """One scored prediction; exactly one of bbox/segmentation is set.

    ``source_index`` records the instance's position in the input file and
    is the final tie-breaker of the documented sort order.
    """

    image_id: int
    score: float
    category_id: int
    source_index: int
    bbox: Optional[BBox] = None
    segmentation: Optional[PolygonSet] = None


@dataclass
class ValidationIssue:
    code: str
    message: str
    location: str

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "location": self.location}


@dataclass
class ValidationReport:
    errors: list[ValidationIssue] = field(default_factory=list)
    warnings: list[ValidationIssue] = field(default_factory=list)
    images_seen: int = 0
    instances_seen: int = 0
    instances_dropped: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, code: str, message: str, location: str) -> None:
        self.errors.append(ValidationIssue(code, message, location))

    def warn(self, code: str, message: str, location: str) -> None:
        self.warnings.append(ValidationIssue(code, message, location))

    def to_dict(self) -> dict:
        return {
            "errors": [e.to_dict() for e in self.errors],
            "warnings": [w.to_dict() for w in self.warnings],
            "counts": {
                "images_seen": self.images_seen,
                "instances_seen": self.instances_seen,
                "instances_dropped": self.instances_dropped,
            },
        }


class Dataset:
    """Immutable ground-truth container: image registry + instances."""

    def __init__(self, images: Iterable[ImageRecord],
                 instances: Iterable[GroundTruthInstance],
                 category_id: int, category_name: str):
        self.images: tuple[ImageRecord, ...] = tuple(images)
        self.instances: tuple[GroundTruthInstance, ...] = tuple(instances)
        self.category_id = category_id
        self.category_name = category_name
        self.images_by_id: dict[int, ImageRecord] = {im.id: im for im in self.images}
        by_image: dict[int, list[GroundTruthInstance]] = {}
        for inst in self.instances:
            by_image.setdefault(inst.image_id, []).append(inst)
        self._by_image = by_image

    def instances_for(self, image_id: int) -> list[GroundTruthInstance]:
        return list(self._by_image.get(image_id, []))


class PredictionSet:
    """Scored instances for one task, in the documented order:
    (image_id ascending, score descending, input index ascending)."""

    def __init__(self, task: str, instances: Iterable[PredictionInstance]):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        self.task = task
        self.instances: tuple[PredictionInstance, ...] = tuple(
            sorted(instances, key=lambda p: (p.image_id, -p.score, p.source_index))
        )
        by_image: dict[int, list[PredictionInstance]] = {}
        for inst in self.instances:
            by_image.setdefault(inst.image_id, []).append(inst)
        self._by_image = by_image

    def __len__(self) -> int:
        return len(self.instances)

    def instances_for(self, image_id: int) -> list[PredictionInstance]:
        return list(self._by_image.get(image_id, []))


def _read_json(path) -> object:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedJsonError(f"{path}: {exc}") from exc


def _require(obj: dict, key: str, location: str):
    if key not in obj:
        raise MissingFieldError(key, location)
    return obj[key]


def _check_ring_list(raw_seg, location: str) -> PolygonSet:
    """Validate a COCO polygon segmentation payload (list of flat rings)."""
    if isinstance(raw_seg, dict):
        raise MalformedJsonError(
            f"{location}: RLE-encoded segmentation is not supported, "
            "only polygon encoding is accepted"
        )
    if not isinstance(raw_seg, list) or not raw_seg:
        raise MalformedJsonError(f"{location}: segmentation must be a non-empty list of rings")
    rings = []
    for k, ring in enumerate(raw_seg):
        if not isinstance(ring, list) or len(ring) < 6 or len(ring) % 2 != 0:
            raise MalformedJsonError(
                f"{location}: ring {k} must hold at least 3 (x, y) vertices"
            )
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in ring):
            raise MalformedJsonError(f"{location}: ring {k} has non-finite coordinates")
        rings.append(ring)
    poly = PolygonSet.from_lists(rings)
    if all(polygon_area(r) == 0 for r in poly.rings):
        raise MalformedJsonError(f"{location}: every ring has zero area")
    return poly


def _check_box_bounds(box: BBox, image: ImageRecord, report: ValidationReport,
                      location: str) -> bool:
    """Edge policy: any overhang is a warning; a box fully outside the
    image is an error.  Returns True when the box may be kept."""
    inside_w = min(box.x2, image.width) - max(box.x, 0.0)
    inside_h = min(box.y2, image.height) - max(box.y, 0.0)
    if inside_w <= 0 or inside_h <= 0:
        report.error("OutsideImage", f"box {box.as_list()} lies fully outside "
                     f"the {image.width}x{image.height} image", location)
        return False
    if box.x < 0 or box.y < 0 or box.x2 > image.width or box.y2 > image.height:
        report.warn("BoxOutsideImage", f"box {box.as_list()} extends past the "
                    f"{image.width}x{image.height} image bounds", location)
    return True


def load_ground_truth(path) -> Dataset:
    """Parse and validate a COCO ground-truth file (always strict)."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise MalformedJsonError(f"{path}: ground truth must be a JSON object")
    raw_images = _require(data, "images", str(path))
    raw_annotations = _require(data, "annotations", str(path))
    raw_categories = _require(data, "categories", str(path))

    if not isinstance(raw_categories, list) or len(raw_categories) != 1:
        raise MultipleCategoriesError(
            f"{path}: expected exactly one category, found "
            f"{len(raw_categories) if isinstance(raw_categories, list) else 'non-list'}"
        )
    category = raw_categories[0]
    category_id = int(_require(category, "id", "categories[0]"))
    category_name = str(category.get("name", ""))

    images: list[ImageRecord] = []
    seen_ids: set[int] = set()
    for k, raw in enumerate(raw_images):
        loc = f"images[{k}]"
        image_id = int(_require(raw, "id", loc))
        width = int(_require(raw, "width", loc))
        height = int(_require(raw, "height", loc))
        file_name = str(_require(raw, "file_name", loc))
        if image_id in seen_ids:
            raise DuplicateImageIdError(f"{loc}: duplicate image id {image_id}")
        if width < 1 or height < 1:
            raise MalformedJsonError(f"{loc}: image dimensions must be >= 1")
        seen_ids.add(image_id)
        images.append(ImageRecord(image_id, width, height, file_name))

    report = ValidationReport()
    instances: list[GroundTruthInstance] = []
    for k, raw in enumerate(raw_annotations):
        ann_id = raw.get("id", k)
        loc = f"annotations[{k}] (id={ann_id})"
        image_id = int(_require(raw, "image_id", loc))
        if image_id not in seen_ids:
            raise UnknownImageRefError(f"{loc}: references unknown image id {image_id}")
        cat = int(_require(raw, "category_id", loc))
        if cat != category_id:
            raise MalformedJsonError(
                f"{loc}: category_id {cat} does not match the dataset category {category_id}"
            )
        raw_box = _require(raw, "bbox", loc)
        if not (isinstance(raw_box, list) and len(raw_box) == 4):
            raise MalformedJsonError(f"{loc}: bbox must be [x, y, w, h]")
        box = BBox(*(float(v) for v in raw_box))
        if not all(math.isfinite(v) for v in raw_box) or box.w <= 0 or box.h <= 0:
            raise MalformedJsonError(f"{loc}: degenerate bbox {raw_box}")
        poly = _check_ring_list(_require(raw, "segmentation", loc), loc)
        image = next(im for im in images if im.id == image_id)
        _check_box_bounds(box, image, report, loc)
        instances.append(GroundTruthInstance(int(ann_id), image_id, box, poly, cat))

    return Dataset(images, instances, category_id, category_name)


def _parse_prediction_items(data, dataset: Dataset, task: str,
                            report: ValidationReport) -> list[PredictionInstance]:
    """Build instances from raw result objects, collecting issues.

    Only instances free of errors are returned; the rest are counted in
    ``instances_dropped`` (the lenient-mode behavior)."""
    retained: list[PredictionInstance] = []
    image_ids_seen: set[int] = set()
    for k, raw in enumerate(data):
        loc = f"predictions[{k}]"
        report.instances_seen += 1
        if not isinstance(raw, dict):
            report.error("MalformedJson", "result entry is not an object", loc)
            report.instances_dropped += 1
            continue

        ok = True
        image_id = raw.get("image_id")
        if image_id is None:
            report.error("MissingField", "missing image_id", loc)
            report.instances_dropped += 1
            continue
        image_id = int(image_id)
        image_ids_seen.add(image_id)
        image = dataset.images_by_id.get(image_id)
        if image is None:
            report.error("UnknownImageRef", f"unknown image id {image_id}", loc)
            ok = False

        score = raw.get("score")
        if score is None:
            report.error("MissingField", "missing score", loc)
            ok = False
            score = 0.0
        else:
            score = float(score)
            if not math.isfinite(score) or score < 0.0 or score > 1.0:
                report.error("ScoreOutOfRange", f"score {score} outside [0, 1]", loc)
                ok = False

        category_id = int(raw.get("category_id", dataset.category_id))
        if category_id != dataset.category_id:
            report.error("CategoryMismatch",
                         f"category_id {category_id} does not match the dataset "
                         f"category {dataset.category_id}", loc)
            ok = False

        box: Optional[BBox] = None
        poly: Optional[PolygonSet] = None
        if task == DETECTION:
            raw_box = raw.get("bbox")
            if raw_box is None:
                kind = "segmentation" if "segmentation" in raw else "nothing"
                report.error("WrongPayloadKind",
                             f"detection task but entry carries {kind}", loc)
                ok = False
            elif not (isinstance(raw_box, list) and len(raw_box) == 4
                      and all(isinstance(v, (int, float)) and math.isfinite(v) for v in raw_box)):
                report.error("MalformedJson", f"bbox must be 4 finite numbers, got {raw_box}", loc)
                ok = False
            else:
                box = BBox(*(float(v) for v in raw_box))
                if box.w <= 0 or box.h <= 0:
                    report.error("DegeneratePayload", f"box {raw_box} has no area", loc)
                    ok = False
                elif image is not None and not _check_box_bounds(box, image, report, loc):
                    ok = False
        else:
            raw_seg = raw.get("segmentation")
            if raw_seg is None:
                kind = "bbox" if "bbox" in raw else "nothing"
                report.error("WrongPayloadKind",
                             f"segmentation task but entry carries {kind}", loc)
                ok = False
            else:
                try:
                    poly = _check_ring_list(raw_seg, loc)
                except MalformedJsonError as exc:
                    code = "RleUnsupported" if "RLE" in str(exc) else "DegeneratePayload"
                    report.error(code, str(exc), loc)
                    ok = False
                if poly is not None and image is not None:
                    if not rasterize(poly, image.width, image.height).any():
                        report.error("DegeneratePayload",
                                     "polygon rasterizes to zero pixels at image resolution",
                                     loc)
                        ok = False

        if not ok:
            report.instances_dropped += 1
            continue
        retained.append(PredictionInstance(image_id, score, category_id, k,
                                           bbox=box, segmentation=poly))
    report.images_seen = len(image_ids_seen)
    return retained


def load_predictions(path, dataset: Dataset, task: str, lenient: bool = False,
                     max_per_image: Optional[int] = None) -> PredictionSet:
    """Load a prediction file for the given task.

    Strict mode (default) raises :class:`SubmissionError` if any instance
    violates an invariant; lenient mode drops the offenders and keeps the
    rest.  ``max_per_image`` optionally caps instances per image, keeping
    the highest-scoring ones (unlimited by default).
    """
    preds, report = parse_predictions(path, dataset, task)
    if report.errors and not lenient:
        raise SubmissionError(report)
    if max_per_image is not None:
        preds = _cap_per_image(preds, max_per_image)
    return PredictionSet(task, preds)


def parse_predictions(path, dataset: Dataset, task: str
                      ) -> tuple[list[PredictionInstance], ValidationReport]:
    """One-pass parse + validation; returns surviving instances and the report."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    data = _read_json(path)
    if not isinstance(data, list):
        raise MalformedJsonError(f"{path}: predictions must be a JSON array")
    report = ValidationReport()
    retained = _parse_prediction_items(data, dataset, task, report)
    return retained, report


def _cap_per_image(preds: list[PredictionInstance], cap: int) -> list[PredictionInstance]:
    ordered = sorted(preds, key=lambda p: (p.image_id, -p.score, p.source_index))
    kept: list[PredictionInstance] = []
    count: dict[int, int] = {}
    for p in ordered:
        n = count.get(p.image_id, 0)
        if n < cap:
            kept.append(p)
            count[p.image_id] = n + 1
    return kept


def validate_predictions(preds: PredictionSet, dataset: Dataset) -> ValidationReport:
    """Re-check every instance invariant on an in-memory prediction set.

    Used for closure checks on fused outputs; a set produced by
    :func:`load_predictions` always yields an error-free report.
    """
    report = ValidationReport()
    image_ids = set()
    for k, inst in enumerate(preds.instances):
        loc = f"instances[{k}]"
        report.instances_seen += 1
        ok = True
        image_ids.add(inst.image_id)
        image = dataset.images_by_id.get(inst.image_id)
        if image is None:
            report.error("UnknownImageRef", f"unknown image id {inst.image_id}", loc)
            ok = False
        if not math.isfinite(inst.score) or not (0.0 <= inst.score <= 1.0):
            report.error("ScoreOutOfRange", f"score {inst.score} outside [0, 1]", loc)
            ok = False
        if inst.category_id != dataset.category_id:
            report.error("CategoryMismatch",
                         f"category_id {inst.category_id} != {dataset.category_id}", loc)
            ok = False
        if preds.task == DETECTION:
            if inst.bbox is None:
                report.error("WrongPayloadKind", "detection instance without a box", loc)
                ok = False
            else:
                if inst.bbox.w <= 0 or inst.bbox.h <= 0:
                    report.error("DegeneratePayload", "box has no area", loc)
                    ok = False
                elif image is not None and not _check_box_bounds(inst.bbox, image, report, loc):
                    ok = False
        else:
            if inst.segmentation is None:
                report.error("WrongPayloadKind", "segmentation instance without a polygon", loc)
                ok = False
            elif image is not None:
                try:
                    empty = not rasterize(inst.segmentation, image.width, image.height).any()
                except DegenerateRingError as exc:
                    report.error("DegeneratePayload", str(exc), loc)
                    ok = False
                else:
                    if empty:
                        report.error("DegeneratePayload",
                                     "polygon rasterizes to zero pixels", loc)
                        ok = False
        if not ok:
            report.instances_dropped += 1
    report.images_seen = len(image_ids)
    return report


def dataset_to_dict(dataset: Dataset) -> dict:
    return {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in dataset.images
        ],
        "annotations": [
            {
                "id": inst.id,
                "image_id": inst.image_id,
                "category_id": inst.category_id,
                "bbox": inst.bbox.as_list(),
                "segmentation": inst.segmentation.as_lists(),
            }
            for inst in dataset.instances
        ],
        "categories": [{"id": dataset.category_id, "name": dataset.category_name}],
    }


def predictions_to_list(preds: PredictionSet) -> list[dict]:
    out = []
    for inst in preds.instances:
        entry: dict = {
            "image_id": inst.image_id,
            "category_id": inst.category_id,
            "score": inst.score,
        }
        if preds.task == DETECTION:
            entry["bbox"] = inst.bbox.as_list()
        else:
            entry["segmentation"] = inst.segmentation.as_lists()
        out.append(entry)
    return out


def write_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
