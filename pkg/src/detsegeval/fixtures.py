"""Deterministic synthetic fixtures: image metadata, grid-aligned and
rotated polygon ground truths, and perturbed predictions with a known
overlap structure.

All coordinates are snapped to a quarter-pixel grid so that every
geometric quantity downstream (areas, intersections, IoU ratios) is
exactly representable in binary floating point; independent scorers then
agree bit-for-bit instead of within an epsilon.  ``perturbation=0``
produces predictions identical to the ground truth with score 1.0.
"""

from __future__ import annotations

import math
import random


def _snap(v: float) -> float:
    return round(v * 4) / 4


def _rect_ring(x0: float, y0: float, w: float, h: float) -> list[float]:
    return [x0, y0, x0 + w, y0, x0 + w, y0 + h, x0, y0 + h]


def _rotated_rect_ring(cx: float, cy: float, a: float, b: float,
                       angle: float) -> list[float]:
    cos_t, sin_t = math.cos(angle), math.sin(angle)
    ring: list[float] = []
    for ux, uy in ((-a, -b), (a, -b), (a, b), (-a, b)):
        ring.append(_snap(cx + ux * cos_t - uy * sin_t))
        ring.append(_snap(cy + ux * sin_t + uy * cos_t))
    return ring


def _hull(ring: list[float]) -> list[float]:
    xs, ys = ring[0::2], ring[1::2]
    return [min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys)]


def _clamp_ring(ring: list[float], width: int, height: int) -> list[float]:
    """Translate a ring so it lies inside the image with a small margin."""
    xs, ys = ring[0::2], ring[1::2]
    dx = dy = 0.0
    if min(xs) < 0.5:
        dx = _snap(0.5 - min(xs))
    elif max(xs) > width - 0.5:
        dx = _snap(width - 0.5 - max(xs))
    if min(ys) < 0.5:
        dy = _snap(0.5 - min(ys))
    elif max(ys) > height - 0.5:
        dy = _snap(height - 0.5 - max(ys))
    out = []
    for x, y in zip(xs, ys):
        out.extend((_snap(x + dx), _snap(y + dy)))
    return out


def _perturb_ring(ring: list[float], amount: float, rng: random.Random,
                  width: int, height: int) -> list[float]:
    xs, ys = ring[0::2], ring[1::2]
    cx, cy = sum(xs) / len(xs), sum(ys) / len(ys)
    span = max(max(xs) - min(xs), max(ys) - min(ys))
    dx = rng.uniform(-amount, amount) * span
    dy = rng.uniform(-amount, amount) * span
    scale = 1.0 + rng.uniform(-amount, amount)
    out = []
    for x, y in zip(xs, ys):
        out.extend((_snap(cx + (x - cx) * scale + dx),
                    _snap(cy + (y - cy) * scale + dy)))
    return _clamp_ring(out, width, height)


def generate_fixture(seed: int, n_images: int = 8, max_instances: int = 4,
                     perturbation: float = 0.15, min_size: int = 64,
                     max_size: int = 128,
                     category_name: str = "rip_current") -> dict:
    """Build one synthetic fixture.

    Returns a dict with keys ``gt`` (COCO ground-truth object), ``det``
    and ``seg`` (prediction result lists for the two tasks).  Output is a
    pure function of the arguments.
    """
    if perturbation < 0:
        raise ValueError("perturbation must be >= 0")
    rng = random.Random(seed)
    images = []
    annotations = []
    det_preds: list[dict] = []
    seg_preds: list[dict] = []
    ann_id = 1
    for image_id in range(1, n_images + 1):
        width = rng.randrange(min_size, max_size + 1, 8)
        height = rng.randrange(min_size, max_size + 1, 8)
        images.append({
            "id": image_id,
            "width": width,
            "height": height,
            "file_name": f"img_{image_id:06d}.jpg",
        })
        for _ in range(rng.randint(0, max_instances)):
            span_w = _snap(rng.uniform(8, max(10, width // 3)))
            span_h = _snap(rng.uniform(8, max(10, height // 3)))
            if rng.random() < 0.5:
                x0 = _snap(rng.uniform(1, width - span_w - 1))
                y0 = _snap(rng.uniform(1, height - span_h - 1))
                ring = _rect_ring(x0, y0, span_w, span_h)
            else:
                cx = _snap(rng.uniform(span_w / 2 + 1, width - span_w / 2 - 1))
                cy = _snap(rng.uniform(span_h / 2 + 1, height - span_h / 2 - 1))
                ring = _rotated_rect_ring(cx, cy, span_w / 2, span_h / 2,
                                          rng.uniform(0, math.pi / 2))
            ring = _clamp_ring(ring, width, height)
            annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": 1,
                "bbox": _hull(ring),
                "segmentation": [ring],
            })
            ann_id += 1

            if perturbation == 0:
                score = 1.0
                pred_ring = list(ring)
            else:
                if rng.random() < 0.15:
                    continue  # missed instance -> false negative
                score = round(rng.uniform(0.30, 0.99), 4)
                pred_ring = _perturb_ring(ring, perturbation, rng, width, height)
            seg_preds.append({
                "image_id": image_id,
                "category_id": 1,
                "score": score,
                "segmentation": [pred_ring],
            })
            det_preds.append({
                "image_id": image_id,
                "category_id": 1,
                "score": score,
                "bbox": _hull(pred_ring),
            })

        if perturbation > 0:
            for _ in range(rng.choice((0, 0, 1, 2))):
                fw = _snap(rng.uniform(6, 18))
                fh = _snap(rng.uniform(6, 18))
                fx = _snap(rng.uniform(1, width - fw - 1))
                fy = _snap(rng.uniform(1, height - fh - 1))
                score = round(rng.uniform(0.05, 0.6), 4)
                ring = _rect_ring(fx, fy, fw, fh)
                seg_preds.append({
                    "image_id": image_id,
                    "category_id": 1,
                    "score": score,
                    "segmentation": [ring],
                })
                det_preds.append({
                    "image_id": image_id,
                    "category_id": 1,
                    "score": score,
                    "bbox": [fx, fy, fw, fh],
                })

    gt = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": category_name}],
    }
    return {"gt": gt, "det": det_preds, "seg": seg_preds}
