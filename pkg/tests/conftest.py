import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for reference_impl


def write_json_file(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def make_gt(images, annotations, category=(1, "rip_current")):
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": category[0], "name": category[1]}],
    }


def image(image_id, width=100, height=100):
    return {"id": image_id, "width": width, "height": height,
            "file_name": f"img_{image_id:06d}.jpg"}


def annotation(ann_id, image_id, bbox, segmentation=None, category_id=1):
    if segmentation is None:
        x, y, w, h = bbox
        segmentation = [[x, y, x + w, y, x + w, y + h, x, y + h]]
    return {"id": ann_id, "image_id": image_id, "category_id": category_id,
            "bbox": bbox, "segmentation": segmentation}


def det_pred(image_id, score, bbox, category_id=1):
    return {"image_id": image_id, "category_id": category_id,
            "score": score, "bbox": bbox}


def seg_pred(image_id, score, segmentation, category_id=1):
    return {"image_id": image_id, "category_id": category_id,
            "score": score, "segmentation": segmentation}


@pytest.fixture
def tiny_gt_path(tmp_path):
    gt = make_gt(
        [image(1), image(2)],
        [
            annotation(1, 1, [10, 10, 20, 20]),
            annotation(2, 1, [50, 50, 30, 20]),
            annotation(3, 2, [5, 5, 40, 40]),
        ],
    )
    return write_json_file(tmp_path / "gt.json", gt)
