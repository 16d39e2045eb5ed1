"""Deterministic inference-time post-processing and ensemble fusion:
confidence filtering, NMS, weighted box fusion, detection/segmentation
score fusion, averaged-mask ensembling, segmentation refinement, IoU/IoA
merging, cross-detector merging, detection-guided filtering and soft mask
merging.

The low-level operations are pure functions over per-image inputs:
scored boxes are ``(BBox, score)`` pairs, scored polygons are
``(PolygonSet, score)`` pairs, probability masks are float arrays in
``[0, 1]``.  The named pipeline presets compose these operations over
whole prediction sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from .coco import (
    DETECTION,
    Dataset,
    PredictionInstance,
    PredictionSet,
    SEGMENTATION,
)
from .errors import DimensionMismatchError, UnknownPresetError, WeightMismatchError
from .geometry import (
    BBox,
    PolygonSet,
    box_iou,
    box_ioa,
    connected_components,
    mask_to_bbox,
    morphology,
    polygon_to_bbox,
    rasterize,
    simplify_polygon,
    trace_largest_contour,
)

ScoredBox = tuple[BBox, float]
ScoredPoly = tuple[PolygonSet, float]

PRESETS = ("identity", "uno", "sigmoid", "kmg", "ntr", "visionx")


@dataclass(frozen=True)
class FusionParams:
    """All pipeline constants, overridable per run.

    The first block holds published values; the second block holds
    documented defaults for stages whose exact constants were never
    published (cross-detector merging, detection-guided filtering, soft
    merging and its refinement).
    """

    w_seg: float = 0.85              # segmentation weight in score fusion
    w_det: float = 0.15              # detection weight in score fusion
    iou_gate: float = 0.20           # min box overlap to fuse scores
    penalty: float = 0.95            # score multiplier when unmatched
    wbf_iou: float = 0.45            # weighted-box-fusion cluster threshold
    close_kernel: int = 5            # closing kernel in segmentation refinement
    min_region_area: int = 24        # area floor in segmentation refinement
    eps_ratio: float = 0.001         # contour simplification ratio
    ensemble_threshold: float = 0.5  # averaged-mask binarization level
    ensemble_min_area: int = 100     # area floor for ensemble instances
    seg_conf: float = 0.16           # final segmentation confidence filter
    det_conf: float = 0.18           # final detection confidence filter
    open_kernel: int = 5             # opening kernel for mask post-processing
    open_iterations: int = 3         # opening repetitions
    nms_iou: float = 0.40            # plain NMS threshold

    # unpublished constants, documented defaults
    merge_iou: float = 0.5           # same-detector IoU merge threshold
    merge_ioa: float = 0.8           # same-detector IoA absorption threshold
    cross_iou: float = 0.5           # cross-detector match threshold
    keep_conf: float = 0.5           # retention floor for unmatched boxes
    guide_iou: float = 0.2           # detection-guided filter threshold
    overlap_gate: float = 0.5        # soft-merge cluster threshold
    refine_kernel: int = 3           # opening kernel after soft merging

    def __post_init__(self):
        if not math.isclose(self.w_seg + self.w_det, 1.0, abs_tol=1e-9):
            raise ValueError("w_seg + w_det must equal 1")
        for name in ("iou_gate", "penalty", "wbf_iou", "ensemble_threshold",
                     "seg_conf", "det_conf", "merge_iou", "merge_ioa",
                     "cross_iou", "keep_conf", "guide_iou", "overlap_gate",
                     "nms_iou"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.min_region_area < 0 or self.ensemble_min_area < 0:
            raise ValueError("area floors must be >= 0")

    def with_overrides(self, **overrides) -> "FusionParams":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown fusion parameters: {sorted(unknown)}")
        return replace(self, **overrides)


# --- per-image operations -----------------------------------------------------

def confidence_filter(items: Sequence[tuple], threshold: float) -> list:
    """Keep items whose score (second tuple element) is >= threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    return [item for item in items if item[1] >= threshold]


def nms(scored_boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy score-descending suppression; survivors keep their scores
    and every surviving pair has IoU below the threshold."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = sorted(range(len(scored_boxes)), key=lambda i: (-scored_boxes[i][1], i))
    kept: list[int] = []
    for i in order:
        box = scored_boxes[i][0]
        if all(box_iou(box, scored_boxes[j][0]) < iou_threshold for j in kept):
            kept.append(i)
    return [scored_boxes[i] for i in kept]


def _box_sort_key(box: BBox, score: float):
    return (-score, box.x, box.y, box.w, box.h)


def weighted_box_fusion(model_outputs: Sequence[Sequence[ScoredBox]],
                        iou_threshold: float,
                        weights: Optional[Sequence[float]] = None) -> list[ScoredBox]:
    """Weighted box fusion across model outputs.

    Boxes are visited in global descending-score order (ties broken by
    coordinates, so equal-weight fusion is invariant under permutation of
    the model list).  Each box joins the first cluster whose running fused
    box overlaps it at or above the threshold, else starts a new cluster.
    Fused coordinates are the score*weight-weighted means of the members;
    the fused score is the weight-weighted mean of member scores.  No
    model-count rescaling is applied.
    """
    if not model_outputs:
        raise WeightMismatchError("need at least one model output list")
    if weights is None:
        weights = [1.0] * len(model_outputs)
    if len(weights) != len(model_outputs) or any(w <= 0 for w in weights):
        raise WeightMismatchError(
            f"need {len(model_outputs)} positive weights, got {list(weights)}"
        )

    entries = []
    for m, boxes in enumerate(model_outputs):
        for k, (box, score) in enumerate(boxes):
            entries.append((box, score, weights[m], m, k))
    entries.sort(key=lambda e: (_box_sort_key(e[0], e[1]), e[3], e[4]))

    clusters: list[dict] = []
    for box, score, weight, _, _ in entries:
        target = None
        for cluster in clusters:
            if box_iou(box, cluster["fused"]) >= iou_threshold:
                target = cluster
                break
        if target is None:
            target = {"coord_num": np.zeros(4), "coord_den": 0.0,
                      "score_num": 0.0, "weight_sum": 0.0, "fused": box}
            clusters.append(target)
        cw = score * weight
        target["coord_num"] += cw * np.array([box.x, box.y, box.w, box.h])
        target["coord_den"] += cw
        target["score_num"] += weight * score
        target["weight_sum"] += weight
        coords = target["coord_num"] / target["coord_den"]
        target["fused"] = BBox(*(float(v) for v in coords))

    fused = [(c["fused"], float(c["score_num"] / c["weight_sum"])) for c in clusters]
    fused.sort(key=lambda e: _box_sort_key(e[0], e[1]))
    return fused


def fuse_seg_det_scores(segs: Sequence[ScoredPoly], dets: Sequence[ScoredBox],
                        params: FusionParams) -> list[ScoredPoly]:
    """Rescore segmentation instances against detection boxes.

    Every segmentation is matched to its single best-IoU detection (no
    one-to-one assignment); if the overlap exceeds the gate the score
    becomes the convex combination w_seg*s_seg + w_det*s_det, otherwise
    the segmentation score is multiplied by the penalty.  Geometry is
    unchanged.
    """
    out: list[ScoredPoly] = []
    for poly, s_seg in segs:
        seg_box = polygon_to_bbox(poly)
        best_iou, best_det = 0.0, 0.0
        for det_box, s_det in dets:
            iou = box_iou(seg_box, det_box)
            if iou > best_iou:
                best_iou, best_det = iou, s_det
        if best_iou > params.iou_gate:
            new_score = params.w_seg * s_seg + params.w_det * best_det
        else:
            new_score = params.penalty * s_seg
        out.append((poly, new_score))
    return out


def refine_segmentation(poly: PolygonSet, width: int, height: int,
                        params: FusionParams) -> Optional[PolygonSet]:
    """Clean one segmentation polygon: rasterize, close, drop small
    regions, keep the largest external contour, simplify.

    Returns None when nothing survives the area floor."""
    mask = rasterize(poly, width, height)
    if mask.any():
        mask = morphology(mask, "close", params.close_kernel, 1)
    comps = [c for c in connected_components(mask, 8)
             if int(c.sum()) >= params.min_region_area]
    if not comps:
        return None
    ring = trace_largest_contour(comps[0]).rings[0]
    ring = simplify_polygon(ring, params.eps_ratio)
    return PolygonSet((ring,))


def average_mask_ensemble(prob_masks: Sequence[np.ndarray],
                          params: FusionParams) -> list[ScoredPoly]:
    """Pixel-wise average an ensemble of probability masks, binarize at
    the threshold (inclusive), split into 8-connected regions, drop small
    ones and emit each survivor as a polygon.

    The instance score is the mean ensemble probability over the region's
    pixels, so unanimous masks score 1.0.
    """
    _check_same_shape(prob_masks)
    mean = np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in prob_masks]), axis=0)
    binary = mean >= params.ensemble_threshold
    out: list[ScoredPoly] = []
    for comp in connected_components(binary, 8):
        if int(comp.sum()) < params.ensemble_min_area:
            continue
        ring = trace_largest_contour(comp).rings[0]
        out.append((PolygonSet((ring,)), float(mean[comp].mean())))
    return out


def merge_boxes_iou_ioa(scored_boxes: Sequence[ScoredBox], iou_thr: float,
                        ioa_thr: float) -> list[ScoredBox]:
    """Suppress redundant detections: walking down by score, a box is
    absorbed when it overlaps a kept box at IoU >= iou_thr or lies mostly
    inside one (IoA >= ioa_thr)."""
    if not (0.0 < iou_thr <= 1.0 and 0.0 < ioa_thr <= 1.0):
        raise ValueError("thresholds must lie in (0, 1]")
    order = sorted(range(len(scored_boxes)), key=lambda i: (-scored_boxes[i][1], i))
    kept: list[int] = []
    for i in order:
        box = scored_boxes[i][0]
        absorbed = any(
            box_iou(scored_boxes[j][0], box) >= iou_thr
            or box_ioa(scored_boxes[j][0], box) >= ioa_thr
            for j in kept
        )
        if not absorbed:
            kept.append(i)
    return [scored_boxes[i] for i in kept]


def cross_model_merge(dets_a: Sequence[ScoredBox], dets_b: Sequence[ScoredBox],
                      iou_thr: float, keep_conf: float) -> list[ScoredBox]:
    """Ensemble two detectors: greedily match boxes one-to-one by best
    IoU at or above the threshold; matched pairs are replaced by the
    coordinate-wise mean box with the mean score, unmatched boxes survive
    only at or above keep_conf."""
    if not (0.0 < iou_thr <= 1.0):
        raise ValueError("iou_thr must lie in (0, 1]")
    candidates = []
    for i, (ba, _) in enumerate(dets_a):
        for j, (bb, _) in enumerate(dets_b):
            iou = box_iou(ba, bb)
            if iou >= iou_thr:
                candidates.append((iou, i, j))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    merged: list[ScoredBox] = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        ba, sa = dets_a[i]
        bb, sb = dets_b[j]
        box = BBox((ba.x + bb.x) / 2, (ba.y + bb.y) / 2,
                   (ba.w + bb.w) / 2, (ba.h + bb.h) / 2)
        merged.append((box, (sa + sb) / 2))
    for i, (box, score) in enumerate(dets_a):
        if i not in used_a and score >= keep_conf:
            merged.append((box, score))
    for j, (box, score) in enumerate(dets_b):
        if j not in used_b and score >= keep_conf:
            merged.append((box, score))
    merged.sort(key=lambda e: _box_sort_key(e[0], e[1]))
    return merged


def detection_guided_filter(segs: Sequence[ScoredPoly], dets: Sequence[ScoredBox],
                            iou_thr: float) -> list[ScoredPoly]:
    """Keep a segmentation only when some detection box overlaps its
    polygon-derived box at IoU >= iou_thr."""
    out = []
    for poly, score in segs:
        seg_box = polygon_to_bbox(poly)
        if any(box_iou(seg_box, det_box) >= iou_thr for det_box, _ in dets):
            out.append((poly, score))
    return out


def soft_mask_merge(prob_masks: Sequence[np.ndarray],
                    overlap_gate: float) -> np.ndarray:
    """Overlap-based soft merging of probability masks from augmented
    views.

    Masks whose binarized (>= 0.5) versions overlap at IoU >= gate form
    connected clusters; each cluster is averaged per pixel and the cluster
    maps are combined by pixel-wise maximum, so non-overlapping masks pass
    through unchanged.  This is one defined reading of an informally
    described procedure.
    """
    _check_same_shape(prob_masks)
    masks = [np.asarray(m, dtype=np.float64) for m in prob_masks]
    n = len(masks)
    binary = [m >= 0.5 for m in masks]
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            union = np.logical_or(binary[i], binary[j]).sum()
            if union == 0:
                continue
            inter = np.logical_and(binary[i], binary[j]).sum()
            if inter / union >= overlap_gate:
                parent[find(i)] = find(j)

    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    out = np.zeros_like(masks[0])
    for members in clusters.values():
        cluster_mean = np.mean(np.stack([masks[i] for i in members]), axis=0)
        np.maximum(out, cluster_mean, out=out)
    return out


def _check_same_shape(masks: Sequence[np.ndarray]) -> None:
    if not masks:
        raise DimensionMismatchError("need at least one mask")
    shape = np.asarray(masks[0]).shape
    for m in masks[1:]:
        if np.asarray(m).shape != shape:
            raise DimensionMismatchError(f"mask shapes differ: {shape} vs {np.asarray(m).shape}")


# --- pipeline presets ----------------------------------------------------------

PRESET_PARAM_OVERRIDES: dict[str, dict] = {
    "identity": {},
    "uno": {},
    "sigmoid": {"wbf_iou": 0.45},
    "kmg": {},
    "ntr": {"wbf_iou": 0.5, "open_kernel": 5, "open_iterations": 3},
    "visionx": {},
}


def preset_params(preset: str, overrides: Optional[dict] = None) -> FusionParams:
    """Resolve parameters: built-in defaults < preset values < overrides."""
    if preset not in PRESETS:
        raise UnknownPresetError(f"unknown preset {preset!r}; choose from {PRESETS}")
    merged = dict(PRESET_PARAM_OVERRIDES[preset])
    merged.update(overrides or {})
    return FusionParams().with_overrides(**merged)


def _boxes_of(instances: Sequence[PredictionInstance]) -> list[ScoredBox]:
    return [(p.bbox, p.score) for p in instances]


def _polys_of(instances: Sequence[PredictionInstance]) -> list[ScoredPoly]:
    return [(p.segmentation, p.score) for p in instances]


def _derived_boxes(polys: Sequence[ScoredPoly]) -> list[ScoredBox]:
    return [(polygon_to_bbox(poly), score) for poly, score in polys]


def _semantic_prob_mask(instances: Sequence[PredictionInstance],
                        width: int, height: int) -> np.ndarray:
    """Union of a model's instance masks as a binary probability map."""
    mask = np.zeros((height, width), dtype=bool)
    for inst in instances:
        mask |= rasterize(inst.segmentation, width, height)
    return mask.astype(np.float64)


def run_preset(preset: str, dataset: Dataset, inputs: Sequence[PredictionSet],
               task: str, params: Optional[FusionParams] = None) -> PredictionSet:
    """Run a named pipeline over loaded prediction sets and return a fused
    prediction set for the requested task."""
    if preset not in PRESETS:
        raise UnknownPresetError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if params is None:
        params = preset_params(preset)
    det_sets = [s for s in inputs if s.task == DETECTION]
    seg_sets = [s for s in inputs if s.task == SEGMENTATION]

    if preset == "identity":
        wanted = det_sets if task == DETECTION else seg_sets
        out = []
        for s in wanted:
            out.extend(s.instances)
        return _rebuild(task, dataset, [(p, p.score, _payload(p)) for p in out])

    if preset in ("uno", "visionx") and not seg_sets:
        raise ValueError(f"preset {preset!r} requires segmentation inputs")
    if preset == "ntr" and not (det_sets or seg_sets):
        raise ValueError("preset 'ntr' requires at least one input")
    if preset == "kmg" and not det_sets:
        raise ValueError("preset 'kmg' requires detection inputs")
    if preset == "sigmoid" and not seg_sets:
        raise ValueError("preset 'sigmoid' requires segmentation inputs")

    results: list[tuple[int, object, float]] = []  # (image_id, payload, score)
    for image in dataset.images:
        w, h = image.width, image.height
        dets_img = [s.instances_for(image.id) for s in det_sets]
        segs_img = [s.instances_for(image.id) for s in seg_sets]

        if preset == "uno":
            prob = [_semantic_prob_mask(insts, w, h) for insts in segs_img]
            instances = average_mask_ensemble(prob, params)
            for poly, score in instances:
                payload = poly if task == SEGMENTATION else polygon_to_bbox(poly)
                results.append((image.id, payload, score))

        elif preset == "sigmoid":
            refined: list[ScoredPoly] = []
            for insts in segs_img:
                for inst in insts:
                    poly = refine_segmentation(inst.segmentation, w, h, params)
                    if poly is not None:
                        refined.append((poly, inst.score))
            det_pairs = [pair for insts in dets_img for pair in _boxes_of(insts)]
            rescored = fuse_seg_det_scores(refined, det_pairs, params)
            if task == SEGMENTATION:
                for poly, score in confidence_filter(rescored, params.seg_conf):
                    results.append((image.id, poly, score))
            else:
                branches: list[list[ScoredBox]] = [_boxes_of(insts) for insts in dets_img]
                branches.append(_derived_boxes(rescored))
                fused = weighted_box_fusion(branches, params.wbf_iou)
                for box, score in confidence_filter(fused, params.det_conf):
                    results.append((image.id, box, score))

        elif preset == "kmg":
            merged = [
                merge_boxes_iou_ioa(_boxes_of(insts), params.merge_iou, params.merge_ioa)
                for insts in dets_img
            ]
            final = merged[0]
            for other in merged[1:]:
                final = cross_model_merge(final, other, params.cross_iou, params.keep_conf)
            if task == DETECTION:
                for box, score in final:
                    results.append((image.id, box, score))
            else:
                segs = [pair for insts in segs_img for pair in _polys_of(insts)]
                for poly, score in detection_guided_filter(segs, final, params.guide_iou):
                    results.append((image.id, poly, score))

        elif preset == "ntr":
            if task == DETECTION:
                branches = [_boxes_of(insts) for insts in dets_img]
                branches += [_derived_boxes(_polys_of(insts)) for insts in segs_img]
                branches = [b for b in branches if b] or [[]]
                for box, score in weighted_box_fusion(branches, params.wbf_iou):
                    results.append((image.id, box, score))
            else:
                for insts in segs_img:
                    for inst in insts:
                        mask = rasterize(inst.segmentation, w, h)
                        mask = morphology(mask, "open", params.open_kernel,
                                          params.open_iterations)
                        if not mask.any():
                            continue
                        poly = trace_largest_contour(mask)
                        results.append((image.id, poly, inst.score))

        elif preset == "visionx":
            prob = [_semantic_prob_mask(insts, w, h) for insts in segs_img]
            merged_map = soft_mask_merge(prob, params.overlap_gate)
            binary = merged_map >= 0.5
            if binary.any():
                binary = morphology(binary, "open", params.refine_kernel, 1)
            for comp in connected_components(binary, 8):
                if int(comp.sum()) < params.min_region_area:
                    continue
                score = float(merged_map[comp].mean())
                if task == SEGMENTATION:
                    payload: object = trace_largest_contour(comp)
                else:
                    payload = mask_to_bbox(comp)
                results.append((image.id, payload, score))

    instances = [
        PredictionInstance(
            image_id=image_id,
            score=float(score),
            category_id=dataset.category_id,
            source_index=k,
            bbox=payload if isinstance(payload, BBox) else None,
            segmentation=payload if isinstance(payload, PolygonSet) else None,
        )
        for k, (image_id, payload, score) in enumerate(results)
    ]
    return PredictionSet(task, instances)


def _payload(inst: PredictionInstance):
    return inst.bbox if inst.bbox is not None else inst.segmentation


def _rebuild(task: str, dataset: Dataset,
             triples: Sequence[tuple[PredictionInstance, float, object]]) -> PredictionSet:
    instances = [
        PredictionInstance(
            image_id=inst.image_id,
            score=float(score),
            category_id=dataset.category_id,
            source_index=k,
            bbox=payload if isinstance(payload, BBox) else None,
            segmentation=payload if isinstance(payload, PolygonSet) else None,
        )
        for k, (inst, score, payload) in enumerate(triples)
    ]
    return PredictionSet(task, instances)


# --- probability-mask fixture format (tests only) ------------------------------

def write_probmask(mask: np.ndarray, path) -> None:
    """Portable float-map: 'probmask W H' header then row-major values."""
    arr = np.asarray(mask, dtype=np.float64)
    h, w = arr.shape
    lines = [f"probmask {w} {h}"]
    for row in arr:
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_probmask(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "probmask":
            raise ValueError(f"{path}: not a probmask file")
        w, h = int(header[1]), int(header[2])
        values = [[float(v) for v in fh.readline().split()] for _ in range(h)]
    arr = np.array(values, dtype=np.float64)
    if arr.shape != (h, w):
        raise ValueError(f"{path}: expected {h}x{w} values")
    return arr
