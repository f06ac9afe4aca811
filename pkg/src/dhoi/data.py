"""Dataset file schema: images, annotations, vocabulary.

One JSON schema serves both real annotations and synthesized
pseudo-annotations; a top-level "source" field distinguishes them.
"""
from __future__ import annotations

import json
import os

from .errors import SchemaError
from .serialization import atomic_write

BOX_LEN = 4


def _require(cond, path, msg):
    if not cond:
        raise SchemaError(path, msg)


def _check_box(box, path, width=None, height=None):
    _require(isinstance(box, (list, tuple)) and len(box) == BOX_LEN, path,
             "box must be [x1, y1, x2, y2]")
    _require(all(isinstance(v, (int, float)) for v in box), path,
             "box coordinates must be numbers")
    x1, y1, x2, y2 = box
    _require(x2 > x1 and y2 > y1, path, "box must satisfy x2 > x1 and y2 > y1")
    if width is not None:
        _require(0 <= x1 and x2 <= width and 0 <= y1 and y2 <= height, path,
                 f"box {box} outside image ({width}x{height})")


def validate_dataset(doc: dict):
    _require(isinstance(doc, dict), "$", "dataset must be a JSON object")
    for key in ("images", "annotations", "vocab"):
        _require(key in doc, "$", f"missing key {key!r}")
    vocab = doc["vocab"]
    _require(isinstance(vocab, dict) and "actions" in vocab and "objects" in vocab,
             "$.vocab", "vocab must contain 'actions' and 'objects' lists")
    actions = set(vocab["actions"])
    objects = set(vocab["objects"])
    dims = {}
    for i, img in enumerate(doc["images"]):
        path = f"$.images[{i}]"
        for key in ("id", "path", "width", "height"):
            _require(key in img, path, f"missing key {key!r}")
        _require(img["width"] > 0 and img["height"] > 0, path,
                 "width and height must be positive")
        _require(img["id"] not in dims, path, f"duplicate image id {img['id']!r}")
        dims[img["id"]] = (img["width"], img["height"])
    for i, ann in enumerate(doc["annotations"]):
        path = f"$.annotations[{i}]"
        for key in ("image_id", "humans", "objects", "hois"):
            _require(key in ann, path, f"missing key {key!r}")
        _require(ann["image_id"] in dims, f"{path}.image_id",
                 f"unknown image id {ann['image_id']!r}")
        width, height = dims[ann["image_id"]]
        for j, box in enumerate(ann["humans"]):
            _check_box(box, f"{path}.humans[{j}]", width, height)
        for j, obj in enumerate(ann["objects"]):
            opath = f"{path}.objects[{j}]"
            _require("box" in obj and "category" in obj, opath,
                     "object needs 'box' and 'category'")
            _check_box(obj["box"], f"{opath}.box", width, height)
            _require(obj["category"] in objects, f"{opath}.category",
                     f"category {obj['category']!r} not in vocab")
        for j, hoi in enumerate(ann["hois"]):
            hpath = f"{path}.hois[{j}]"
            for key in ("human_idx", "object_idx", "action"):
                _require(key in hoi, hpath, f"missing key {key!r}")
            _require(0 <= hoi["human_idx"] < len(ann["humans"]),
                     f"{hpath}.human_idx", "human_idx out of range")
            _require(0 <= hoi["object_idx"] < len(ann["objects"]),
                     f"{hpath}.object_idx", "object_idx out of range")
            _require(hoi["action"] in actions, f"{hpath}.action",
                     f"action {hoi['action']!r} not in vocab")


def save_dataset(path: str, doc: dict):
    validate_dataset(doc)
    payload = json.dumps(doc, indent=2, sort_keys=True).encode("utf-8")
    atomic_write(path, payload)


def load_dataset(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    validate_dataset(doc)
    return doc


def iter_hoi_triplets(doc: dict):
    """Yield (image_id, human_box, object_box, object_class, action) tuples."""
    obj_by_ann = {}
    for ann in doc["annotations"]:
        for hoi in ann["hois"]:
            obj = ann["objects"][hoi["object_idx"]]
            yield (ann["image_id"], tuple(ann["humans"][hoi["human_idx"]]),
                   tuple(obj["box"]), obj["category"], hoi["action"])


def image_paths(doc: dict, base_dir: str = "") -> dict:
    return {img["id"]: os.path.join(base_dir, img["path"]) if base_dir else img["path"]
            for img in doc["images"]}
