"""Convert upstream annotations into the toolkit's JSONL dataset schemas.

Referring-expression sources are JSON lists of entries::

    {"image": "img.png", "split": "val", "bbox": [x, y, w, h],
     "sentences": ["one caption", ...]}          # or "caption": "..."
     optionally "proposals": [[x, y, w, h], ...]

Part-detection sources are COCO-style instance JSON where part categories
are named ``object:part`` and part annotations point at their object via
``parent_ann_id`` (a containment fallback handles sources without the link).

Output lines match the evaluation harness exactly::

    rec:  {"image", "proposals", "caption", "gt_box"}
    part: {"image", "object_box", "labels", "gt"}
"""

from __future__ import annotations

import json
from pathlib import Path


class ConversionError(ValueError):
    pass


def _require(entry: dict, field: str, where: str):
    if field not in entry:
        raise ConversionError(f"{where}: missing field {field!r}")
    return entry[field]


def _as_box(value, where: str) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ConversionError(f"{where}: field 'bbox' must be [x, y, w, h]")
    box = [float(v) for v in value]
    if box[2] <= 0 or box[3] <= 0:
        raise ConversionError(f"{where}: box extents must be positive, got {box}")
    return box


def _load_json(path) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConversionError(f"{path}: {exc}") from exc


def convert_rec(source_path, out_path, split: str | None = None,
                proposal_source: str = "gt", detector_file=None,
                image_root: str = "") -> int:
    """Write rec JSONL records; returns the number of lines written.

    ``proposal_source``: ``gt`` pools the ground-truth boxes of all entries
    on the same image (so the target box is always among the proposals);
    ``detector-file`` reads per-image box lists from ``detector_file``.
    """
    entries = _load_json(source_path)
    if not isinstance(entries, list):
        raise ConversionError(f"{source_path}: expected a JSON list of entries")
    if proposal_source not in ("gt", "detector-file"):
        raise ConversionError(f"unknown proposal source {proposal_source!r}")
    detector = None
    if proposal_source == "detector-file":
        if detector_file is None:
            raise ConversionError("proposal source 'detector-file' needs a detector file")
        detector = _load_json(detector_file)
        if not isinstance(detector, dict):
            raise ConversionError(f"{detector_file}: expected an image -> boxes map")

    selected = []
    for i, entry in enumerate(entries):
        where = f"{source_path}: entry {i}"
        if not isinstance(entry, dict):
            raise ConversionError(f"{where}: expected an object")
        if split is not None and entry.get("split", split) != split:
            continue
        image = str(_require(entry, "image", where))
        bbox = _as_box(_require(entry, "bbox", where), where)
        captions = entry.get("sentences")
        if captions is None:
            captions = [_require(entry, "caption", where)]
        if not isinstance(captions, list) or not captions:
            raise ConversionError(f"{where}: field 'sentences' must be a non-empty list")
        selected.append((image, bbox, [str(c).strip() for c in captions],
                         entry.get("proposals"), where))

    gt_by_image: dict[str, list[list[float]]] = {}
    for image, bbox, _, _, _ in selected:
        gt_by_image.setdefault(image, []).append(bbox)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for image, bbox, captions, extra, where in selected:
            if detector is not None:
                if image not in detector:
                    raise ConversionError(f"{where}: detector file has no boxes for {image!r}")
                proposals = [_as_box(b, where) for b in detector[image]]
            else:
                proposals = [list(b) for b in gt_by_image[image]]
                for box in (extra or []):
                    proposals.append(_as_box(box, where))
            for caption in captions:
                if not caption:
                    raise ConversionError(f"{where}: empty caption")
                fh.write(json.dumps({
                    "image": str(Path(image_root) / image) if image_root else image,
                    "proposals": proposals,
                    "caption": caption,
                    "gt_box": bbox,
                }, sort_keys=True) + "\n")
                written += 1
    return written


def _contains(outer: list[float], inner: list[float]) -> bool:
    icx = inner[0] + inner[2] / 2
    icy = inner[1] + inner[3] / 2
    return (outer[0] <= icx <= outer[0] + outer[2]
            and outer[1] <= icy <= outer[1] + outer[3])


def convert_paco(source_path, out_path, image_root: str = "") -> int:
    """Write part JSONL records (one per object with parts); returns the count."""
    data = _load_json(source_path)
    where = str(source_path)
    for field in ("images", "categories", "annotations"):
        if field not in data:
            raise ConversionError(f"{where}: missing field {field!r}")

    images = {}
    for img in data["images"]:
        images[_require(img, "id", f"{where}: images")] = str(
            _require(img, "file_name", f"{where}: images"))

    categories = {}
    part_names: dict[str, list[str]] = {}
    for cat in data["categories"]:
        cat_id = _require(cat, "id", f"{where}: categories")
        name = str(_require(cat, "name", f"{where}: categories"))
        categories[cat_id] = name
        if ":" in name:
            obj_name, part_name = name.split(":", 1)
            part_names.setdefault(obj_name, []).append(part_name)

    objects = {}
    parts = []
    for i, ann in enumerate(data["annotations"]):
        ann_where = f"{where}: annotations[{i}]"
        ann_id = _require(ann, "id", ann_where)
        cat_id = _require(ann, "category_id", ann_where)
        if cat_id not in categories:
            raise ConversionError(f"{ann_where}: unknown category_id {cat_id}")
        bbox = _as_box(_require(ann, "bbox", ann_where), ann_where)
        image_id = _require(ann, "image_id", ann_where)
        if image_id not in images:
            raise ConversionError(f"{ann_where}: unknown image_id {image_id}")
        name = categories[cat_id]
        if ":" in name:
            parts.append((ann, name.split(":", 1), bbox, ann_where))
        else:
            objects[ann_id] = {"image_id": image_id, "category": name,
                               "bbox": bbox, "parts": []}

    for ann, (obj_name, part_name), bbox, ann_where in parts:
        parent = ann.get("parent_ann_id")
        if parent is not None:
            if parent not in objects:
                raise ConversionError(f"{ann_where}: parent_ann_id {parent} is not an object")
            objects[parent]["parts"].append((part_name, bbox))
            continue
        candidates = [obj for obj in objects.values()
                      if obj["image_id"] == ann["image_id"]
                      and obj["category"] == obj_name
                      and _contains(obj["bbox"], bbox)]
        if len(candidates) != 1:
            raise ConversionError(
                f"{ann_where}: cannot link part to an object "
                f"({len(candidates)} candidates); add parent_ann_id")
        candidates[0]["parts"].append((part_name, bbox))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for obj in objects.values():
            if not obj["parts"]:
                continue
            labels = sorted(set(part_names.get(obj["category"], []))
                            | {name for name, _ in obj["parts"]})
            image = images[obj["image_id"]]
            fh.write(json.dumps({
                "image": str(Path(image_root) / image) if image_root else image,
                "object_box": obj["bbox"],
                "labels": labels,
                "gt": [{"label": name, "box": box} for name, box in obj["parts"]],
            }, sort_keys=True) + "\n")
            written += 1
    return written
