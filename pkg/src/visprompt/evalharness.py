"""Dataset ingestion, IoU@0.5 accuracy, and end-to-end benchmark orchestration.

Datasets are JSONL, one record per line::

    rec:  {"image": "path.png", "proposals": [[x,y,w,h], ...], "caption": "...", "gt_box": [x,y,w,h]}
    part: {"image": "path.png", "object_box": [x,y,w,h], "labels": ["..."], "gt": [{"label": "...", "box": [...]}, ...]}

A record with an empty proposal list runs the proposal-free grid pipeline.
Per-record failures are collected into the report, never fatal.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imagecore, prompting, proposals, scoring
from .imagecore import Box
from .prompting import PromptKind, PromptStyle, Region

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class RecRecord:
    image: str
    proposals: list[Box]
    caption: str
    gt_box: Box


@dataclass
class PartRecord:
    image: str
    object_box: Box
    labels: list[str]
    gt: list[tuple[str, Box]]


@dataclass
class EvalConfig:
    """Resolved run configuration; defaults match the best-reported settings."""

    kinds: tuple[PromptKind, ...] = (PromptKind.BLUR_REVERSE_MASK,)
    post: str = "none"  # none | relations | subtract | relations+subtract
    style: PromptStyle = field(default_factory=PromptStyle)
    square_mode: str | None = None  # None: per-kind default
    square_side: int = 224
    grid_g: int = 16
    nms_thr: float = 0.7
    mask_filter: bool = True
    neg_q: int = 10
    seed: int = 0
    ensemble_mode: str = "mean"
    relation_agg: str = "max"
    matching: str = "hungarian"  # hungarian | argmax
    label_template: str = "a photo of "
    caption_template: str = ""

    def __post_init__(self):
        if self.post not in ("none", "relations", "subtract", "relations+subtract"):
            raise ValueError(f"unknown post chain {self.post!r}")
        if self.matching not in ("hungarian", "argmax"):
            raise ValueError(f"matching must be 'hungarian' or 'argmax', got {self.matching!r}")

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kinds"] = [k.code for k in self.kinds]
        out["style"]["line_color"] = list(self.style.line_color)
        out["style"]["fill_color"] = list(self.style.fill_color)
        return out


@dataclass
class EvalReport:
    task: str
    records: list[dict]
    hits: int
    total: int
    accuracy: float
    errors: list[dict]
    config: dict
    ips: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# JSONL ingestion
# ---------------------------------------------------------------------------

def _parse_box(value, path, line_no, name) -> Box:
    if (not isinstance(value, (list, tuple))) or len(value) != 4:
        raise DatasetError(f"{path}:{line_no}: field {name!r} must be [x, y, w, h]")
    try:
        return Box(*[float(v) for v in value])
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{path}:{line_no}: bad {name!r}: {exc}") from exc


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{line_no}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{line_no}: expected a JSON object")
            yield line_no, obj


def _warn_unknown(obj, known, path, line_no):
    unknown = set(obj) - known
    if unknown:
        log.warning("%s:%d: ignoring unknown fields %s", path, line_no, sorted(unknown))


def load_rec_jsonl(path) -> list[RecRecord]:
    records = []
    for line_no, obj in _iter_jsonl(path):
        _warn_unknown(obj, {"image", "proposals", "caption", "gt_box"}, path, line_no)
        for name in ("image", "caption", "gt_box"):
            if name not in obj:
                raise DatasetError(f"{path}:{line_no}: missing field {name!r}")
        caption = str(obj["caption"]).strip()
        if not caption:
            raise DatasetError(f"{path}:{line_no}: caption is empty")
        boxes = [_parse_box(b, path, line_no, f"proposals[{i}]")
                 for i, b in enumerate(obj.get("proposals", []))]
        records.append(RecRecord(
            image=str(obj["image"]),
            proposals=boxes,
            caption=caption,
            gt_box=_parse_box(obj["gt_box"], path, line_no, "gt_box"),
        ))
    if not records:
        raise DatasetError(f"{path}: no records")
    return records


def load_part_jsonl(path) -> list[PartRecord]:
    records = []
    for line_no, obj in _iter_jsonl(path):
        _warn_unknown(obj, {"image", "object_box", "labels", "gt"}, path, line_no)
        for name in ("image", "object_box", "labels", "gt"):
            if name not in obj:
                raise DatasetError(f"{path}:{line_no}: missing field {name!r}")
        labels = [str(v).strip() for v in obj["labels"]]
        if not labels or any(not v for v in labels):
            raise DatasetError(f"{path}:{line_no}: labels must be non-empty strings")
        gt = []
        for i, entry in enumerate(obj["gt"]):
            if not isinstance(entry, dict) or "label" not in entry or "box" not in entry:
                raise DatasetError(f"{path}:{line_no}: gt[{i}] must have 'label' and 'box'")
            label = str(entry["label"]).strip()
            if label not in labels:
                raise DatasetError(f"{path}:{line_no}: gt[{i}] label {label!r} not in labels")
            gt.append((label, _parse_box(entry["box"], path, line_no, f"gt[{i}].box")))
        records.append(PartRecord(
            image=str(obj["image"]),
            object_box=_parse_box(obj["object_box"], path, line_no, "object_box"),
            labels=labels,
            gt=gt,
        ))
    if not records:
        raise DatasetError(f"{path}: no records")
    return records


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def _negatives_for(record: RecRecord, pool: Sequence[tuple[str, str]], q: int,
                   seed: int) -> list[str]:
    """Sample q negative captions for one record.

    Candidates are captions of other images; the draw is seeded by the
    record's content (not its position) from a sorted pool, so it is
    invariant to record order.
    """
    candidates = sorted({caption for image, caption in pool
                         if image != record.image and caption != record.caption})
    if not candidates or q <= 0:
        return []
    digest = hashlib.sha256(f"{record.image}\x00{record.caption}".encode()).digest()
    words = [seed] + [int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4)]
    rng = np.random.default_rng(words)
    take = min(q, len(candidates))
    picks = rng.choice(len(candidates), size=take, replace=False)
    return [candidates[int(i)] for i in sorted(picks)]


def _build_regions(img, record_proposals, segmenter, config: EvalConfig):
    """Region list plus the box used for the hit test, per proposal."""
    needs_masks = any(k.requires_mask for k in config.kinds)
    if not needs_masks:
        return ([Region(box=b) for b in record_proposals],
                list(record_proposals), list(record_proposals))
    props = proposals.propose_from_boxes(
        segmenter, img, record_proposals, mask_filter=config.mask_filter)
    regions = [Region(box=p.query_box, mask=p.mask) for p in props]
    return regions, [p.query_box for p in props], [p.box for p in props]


def _render_batch(img, regions, config: EvalConfig) -> dict[PromptKind, list[np.ndarray]]:
    rendered: dict[PromptKind, list[np.ndarray]] = {}
    for kind in config.kinds:
        mode = config.square_mode or prompting.default_square_mode(kind)
        rendered[kind] = [
            prompting.prepare_input(prompt, mode, config.square_side)
            for prompt in prompting.render_prompts(img, list(regions), kind, config.style)
        ]
    return rendered


def _ensembled_similarity(scorer, rendered, texts: list[str], template: str,
                          config: EvalConfig) -> np.ndarray:
    captions = scoring.CaptionSet(texts=tuple(texts), template=template)
    matrices = [scoring.similarity_matrix(scorer, imgs, captions)
                for imgs in rendered.values()]
    return scoring.ensemble_scores(matrices, config.ensemble_mode)


def _box_as_list(box: Box) -> list[float]:
    return [box.x, box.y, box.w, box.h]


# ---------------------------------------------------------------------------
# referring expression comprehension
# ---------------------------------------------------------------------------

def _rec_one(scorer, segmenter, record: RecRecord, config: EvalConfig,
             negative_pool: Sequence[str]) -> dict:
    img = imagecore.load_image(record.image)
    grid_mode = not record.proposals
    if grid_mode:
        if segmenter is None:
            raise ValueError("record has no proposals and no segmenter is configured")
        props = proposals.propose_grid(
            segmenter, img, proposals.GridSpec(config.grid_g),
            nms_thr=config.nms_thr, mask_filter=config.mask_filter)
        if not props:
            raise ValueError("grid proposal generation returned no candidates")
        regions = [Region(box=p.box, mask=p.mask) for p in props]
        query_boxes = [p.box for p in props]
        tight_boxes = [p.box for p in props]
    else:
        regions, query_boxes, tight_boxes = _build_regions(
            img, record.proposals, segmenter, config)

    use_relations = "relations" in config.post
    use_subtract = "subtract" in config.post

    parsed = scoring.parse_caption(record.caption)
    texts = [record.caption]
    head_idx = anchor_idx = None
    if use_relations and parsed.relation is not scoring.Relation.NONE:
        head_idx = len(texts)
        texts.append(parsed.head)
        if parsed.anchor:
            anchor_idx = len(texts)
            texts.append(parsed.anchor)
    negatives = _negatives_for(record, negative_pool, config.neg_q, config.seed) if use_subtract else []
    neg_start = len(texts)
    texts.extend(negatives)

    rendered = _render_batch(img, regions, config)
    sim = _ensembled_similarity(scorer, rendered, texts, config.caption_template, config)

    column = sim[:, [0]]
    if use_relations and parsed.relation is not scoring.Relation.NONE:
        head = sim[:, [head_idx]]
        anchor = sim[:, [anchor_idx]] if anchor_idx is not None else np.zeros_like(head)
        boxes = [r.box for r in regions]
        column = scoring.apply_relations(
            column, boxes, [parsed], head, anchor,
            image_size=img.shape[:2], agg=config.relation_agg)
    if use_subtract and negatives:
        neg = scoring.NegativeSet(texts=negatives, scores=sim[:, neg_start:])
        column = scoring.subtract_negatives(column, neg)

    choice = scoring.select_region(column)[0]
    hit_box = tight_boxes[choice] if grid_mode else query_boxes[choice]
    iou = box_iou(hit_box, record.gt_box)
    return {
        "image": record.image,
        "caption": record.caption,
        "selected_index": choice,
        "selected_query_box": _box_as_list(query_boxes[choice]),
        "selected_tight_box": _box_as_list(tight_boxes[choice]),
        "hit_box_source": "tight" if grid_mode else "query",
        "iou": iou,
        "hit": iou > 0.5,
    }


def evaluate_rec(scorer, segmenter, records: Sequence[RecRecord],
                 config: EvalConfig, jobs: int = 1) -> EvalReport:
    """Run referring-expression comprehension over a record list."""
    if not records:
        raise ValueError("no records to evaluate")
    pool = [(r.image, r.caption) for r in records]
    started = time.perf_counter()
    results: list[dict | None] = [None] * len(records)
    errors = []

    def run(i: int):
        return _rec_one(scorer, segmenter, records[i], config, pool)

    outcomes = _run_records(run, len(records), jobs)
    for i, (value, error) in enumerate(outcomes):
        if error is not None:
            errors.append({"index": i, "image": records[i].image, "error": error})
            results[i] = {"image": records[i].image, "caption": records[i].caption,
                          "hit": False, "error": error}
        else:
            results[i] = value
    elapsed = time.perf_counter() - started
    hits = sum(1 for r in results if r and r.get("hit"))
    return EvalReport(
        task="rec",
        records=[r for r in results if r is not None],
        hits=hits,
        total=len(records),
        accuracy=hits / len(records),
        errors=errors,
        config=config.as_dict(),
        ips=len(records) / elapsed if elapsed > 0 else 0.0,
    )


# ---------------------------------------------------------------------------
# part detection
# ---------------------------------------------------------------------------

def _part_one(scorer, segmenter, record: PartRecord, config: EvalConfig) -> dict:
    img = imagecore.load_image(record.image)
    cut = imagecore.crop(img, record.object_box)
    # gt boxes move into the crop frame by the actual clamped crop origin
    ox, oy, _, _ = imagecore.crop_window(record.object_box, *img.shape[:2])
    props = proposals.propose_grid(
        segmenter, cut, proposals.GridSpec(config.grid_g),
        nms_thr=config.nms_thr, mask_filter=config.mask_filter)

    part_hits: list[dict] = []
    if not props:
        for label, gt_box in record.gt:
            part_hits.append({"label": label, "hit": False, "iou": 0.0, "proposal": None})
        return {"image": record.image, "parts": part_hits, "proposal_count": 0}

    regions = [Region(box=p.box, mask=p.mask) for p in props]
    rendered = _render_batch(cut, regions, config)
    sim = _ensembled_similarity(scorer, rendered, record.labels, config.label_template, config)

    label_to_proposal: dict[int, int | None] = {}
    if config.matching == "hungarian":
        for row, col in scoring.hungarian_assign(sim):
            label_to_proposal[col] = row
    else:
        chosen = scoring.select_labels(sim)
        for col in range(len(record.labels)):
            candidates = [n for n, label in enumerate(chosen) if label == col]
            if candidates:
                best = max(candidates, key=lambda n: (sim[n, col], -n))
                label_to_proposal[col] = best

    for label, gt_box in record.gt:
        col = record.labels.index(label)
        row = label_to_proposal.get(col)
        if row is None:
            part_hits.append({"label": label, "hit": False, "iou": 0.0, "proposal": None})
            continue
        local_gt = Box(gt_box.x - ox, gt_box.y - oy, gt_box.w, gt_box.h)
        iou = box_iou(props[row].box, local_gt)
        part_hits.append({
            "label": label,
            "hit": iou > 0.5,
            "iou": iou,
            "proposal": _box_as_list(props[row].box),
        })
    return {"image": record.image, "parts": part_hits, "proposal_count": len(props)}


def evaluate_partdet(scorer, segmenter, records: Sequence[PartRecord],
                     config: EvalConfig, jobs: int = 1) -> EvalReport:
    """Run zero-shot part detection; one hit flag per ground-truth part."""
    if not records:
        raise ValueError("no records to evaluate")
    started = time.perf_counter()
    errors = []
    results: list[dict | None] = [None] * len(records)

    def run(i: int):
        return _part_one(scorer, segmenter, records[i], config)

    outcomes = _run_records(run, len(records), jobs)
    for i, (value, error) in enumerate(outcomes):
        if error is not None:
            errors.append({"index": i, "image": records[i].image, "error": error})
            results[i] = {"image": records[i].image,
                          "parts": [{"label": label, "hit": False, "iou": 0.0, "proposal": None}
                                    for label, _ in records[i].gt],
                          "error": error}
        else:
            results[i] = value
    elapsed = time.perf_counter() - started
    all_parts = [p for r in results if r for p in r["parts"]]
    hits = sum(1 for p in all_parts if p["hit"])
    total = len(all_parts)
    return EvalReport(
        task="partdet",
        records=[r for r in results if r is not None],
        hits=hits,
        total=total,
        accuracy=hits / total if total else 0.0,
        errors=errors,
        config=config.as_dict(),
        ips=len(records) / elapsed if elapsed > 0 else 0.0,
    )


def _run_records(run, count: int, jobs: int) -> list[tuple[dict | None, str | None]]:
    """Run records, optionally in parallel; output is index-ordered."""
    def attempt(i: int):
        try:
            return run(i), None
        except Exception as exc:  # per-record isolation is the contract
            return None, f"{type(exc).__name__}: {exc}"

    if jobs <= 1:
        return [attempt(i) for i in range(count)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(attempt, range(count)))


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def report_json(report: EvalReport) -> str:
    return json.dumps(report.as_dict(), sort_keys=True, indent=2)


def report_markdown(report: EvalReport) -> str:
    lines = [
        f"# {report.task} report",
        "",
        f"- accuracy: **{report.accuracy:.4f}** ({report.hits}/{report.total})",
        f"- errors: {len(report.errors)}",
        f"- throughput: {report.ips:.2f} images/s",
        "",
        "## Config",
        "```json",
        json.dumps(report.config, sort_keys=True, indent=2),
        "```",
    ]
    if report.errors:
        lines += ["", "## Errors"]
        lines += [f"- record {e['index']} ({e['image']}): {e['error']}" for e in report.errors]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path, fmt: str = "json") -> None:
    """Atomically write a report as JSON or markdown."""
    if fmt == "json":
        text = report_json(report)
    elif fmt == "markdown":
        text = report_markdown(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
