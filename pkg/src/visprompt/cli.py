"""Command-line surface: render prompts, run benchmarks, manage the cache."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import backends, evalharness, imagecore, prompting, proposals, synthetic
from .evalharness import EvalConfig
from .imagecore import Box
from .prompting import PromptStyle

CACHE_ENV = "VISPROMPT_CACHE_DIR"


def _cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "visprompt"))


def _parse_color(value: str) -> tuple[int, int, int]:
    value = value.strip().lower()
    if value in imagecore.PALETTE:
        return imagecore.PALETTE[value]
    parts = value.split(",")
    if len(parts) == 3:
        try:
            rgb = tuple(int(p) for p in parts)
            if all(0 <= c <= 255 for c in rgb):
                return rgb  # type: ignore[return-value]
        except ValueError:
            pass
    raise click.BadParameter(
        f"{value!r}; use a palette name ({', '.join(imagecore.PALETTE)}) or R,G,B")


def _style_options(fn):
    options = [
        click.option("--sigma", type=float, default=100.0, show_default=True,
                     help="Gaussian blur standard deviation for blur prompts."),
        click.option("--thickness", type=float, default=2, show_default=True,
                     help="Stroke thickness in pixels for line prompts."),
        click.option("--line-color", default="red", show_default=True,
                     help="Stroke color (palette name or R,G,B)."),
        click.option("--fill-color", default="green", show_default=True,
                     help="Fill color for colored prompts (palette name or R,G,B)."),
        click.option("--alpha", type=float, default=0.5, show_default=True,
                     help="Fill opacity for colored prompts."),
        click.option("--expand", type=float, default=1.0, show_default=True,
                     help="Region expand scale about its center."),
        click.option("--square", type=click.Choice(["auto", *prompting.SQUARE_MODES]),
                     default="auto", show_default=True,
                     help="Square preprocessing; auto = stretch for crops, pad otherwise."),
        click.option("--side", type=int, default=224, show_default=True,
                     help="Square input side length the scorer sees."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _run_options(fn):
    options = [
        click.option("--prompts", default="d4", show_default=True,
                     help="Prompt ensemble, kinds joined by '|' (e.g. p|d1|d3|d4)."),
        click.option("--post", type=click.Choice(["none", "relations", "subtract",
                                                  "relations+subtract"]),
                     default="none", show_default=True, help="Score post-processing chain."),
        click.option("--neg-q", type=int, default=10, show_default=True,
                     help="Negative captions sampled per record for subtraction."),
        click.option("--grid", type=int, default=16, show_default=True,
                     help="Keypoints per image side for proposal-free mode."),
        click.option("--nms", type=float, default=0.7, show_default=True,
                     help="Mask IoU threshold for proposal NMS."),
        click.option("--mask-filter/--no-mask-filter", default=True, show_default=True,
                     help="Drop small islands / fill small holes in masks."),
        click.option("--backend", type=click.Choice(["fixture", "remote"]),
                     default="fixture", show_default=True, help="Scorer backend."),
        click.option("--segmenter", type=click.Choice(["auto", "fixture", "remote", "none"]),
                     default="auto", show_default=True,
                     help="Segmenter backend; auto follows --backend."),
        click.option("--url", default=None, help="Base URL of the remote model server."),
        click.option("--seed", type=int, default=0, show_default=True,
                     help="Seed for all randomized choices (negative sampling, fixtures)."),
        click.option("--relation-agg", type=click.Choice(["max", "sum"]), default="max",
                     show_default=True, help="Anchored-relation aggregation over proposals."),
        click.option("--cache/--no-cache", "use_cache", default=False, show_default=True,
                     help="Cache remote responses on disk."),
        click.option("--jobs", type=int, default=1, show_default=True,
                     help="Record-level parallelism."),
        click.option("--output", type=click.Path(dir_okay=False), default=None,
                     help="Report path (default: <dataset>.report.json)."),
        click.option("--format", "fmt", type=click.Choice(["json", "markdown"]),
                     default="json", show_default=True, help="Report format."),
        click.option("--strict", is_flag=True,
                     help="Exit with status 2 if any record fails."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_style(sigma, thickness, line_color, fill_color, alpha, expand) -> PromptStyle:
    return PromptStyle(
        line_color=_parse_color(line_color),
        line_thickness=thickness,
        fill_color=_parse_color(fill_color),
        alpha=alpha,
        blur_sigma=sigma,
        expand_scale=expand,
    )


def _build_config(prompts, post, style, square, side, grid, nms, mask_filter,
                  neg_q, seed, relation_agg, matching="hungarian") -> EvalConfig:
    try:
        kinds = tuple(prompting.parse_ensemble(prompts))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    return EvalConfig(
        kinds=kinds,
        post=post,
        style=style,
        square_mode=None if square == "auto" else square,
        square_side=side,
        grid_g=grid,
        nms_thr=nms,
        mask_filter=mask_filter,
        neg_q=neg_q,
        seed=seed,
        relation_agg=relation_agg,
        matching=matching,
    )


def _build_backends(backend, segmenter, url, seed, use_cache, needs_masks):
    cache = backends.DiskCache(_cache_dir()) if use_cache else None
    if backend == "remote":
        if not url:
            raise click.UsageError("--backend remote requires --url")
        remote_cfg = backends.RemoteConfig(base_url=url, cache=cache)
        scorer = backends.RemoteScorer(remote_cfg)
    else:
        scorer = backends.FixtureScorer(seed=seed)
    seg_choice = backend if segmenter == "auto" else segmenter
    if seg_choice == "none":
        seg = None
    elif seg_choice == "remote":
        if not url:
            raise click.UsageError("--segmenter remote requires --url")
        seg = backends.RemoteSegmenter(backends.RemoteConfig(base_url=url, cache=cache))
    else:
        seg = backends.FixtureSegmenter()
    if needs_masks and seg is None:
        raise click.UsageError("mask prompts (d*) configured but segmenter is 'none'")
    return scorer, seg


def _finish_run(report, dataset, output, fmt, strict):
    out = Path(output) if output else Path(str(dataset) + ".report." + ("md" if fmt == "markdown" else "json"))
    evalharness.write_report(report, out, fmt)
    click.echo(f"accuracy {report.accuracy:.4f} ({report.hits}/{report.total}), "
               f"{len(report.errors)} errors; report: {out}")
    if strict and report.errors:
        sys.exit(2)


@click.group()
def main():
    """Zero-shot visual prompting toolkit."""


@main.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", default="d4", show_default=True,
              help="Prompt kind or '|' ensemble to render.")
@click.option("--box", "boxes", multiple=True,
              help="Proposal box as x,y,w,h (repeatable).")
@click.option("--geometry", type=click.Path(dir_okay=False),
              help="JSON file with {'boxes': [[x,y,w,h], ...], 'masks': [RLE, ...]}.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Where the rendered PNGs go.")
@_style_options
def render(image, kind, boxes, geometry, out_dir, sigma, thickness, line_color,
           fill_color, alpha, expand, square, side):
    """Render visual prompts onto IMAGE, one PNG per (proposal, kind)."""
    try:
        kinds = prompting.parse_ensemble(kind)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    img = imagecore.load_image(image)
    regions = []
    for spec in boxes:
        parts = spec.split(",")
        if len(parts) != 4:
            raise click.UsageError(f"--box expects x,y,w,h, got {spec!r}")
        regions.append(prompting.Region(box=Box(*[float(p) for p in parts])))
    if geometry:
        try:
            payload = json.loads(Path(geometry).read_text())
            geo_boxes = payload.get("boxes", [])
            geo_masks = payload.get("masks", [])
            for i, b in enumerate(geo_boxes):
                mask = proposals.rle_decode(geo_masks[i]) if i < len(geo_masks) else None
                regions.append(prompting.Region(box=Box(*[float(v) for v in b]), mask=mask))
            for j in range(len(geo_boxes), len(geo_masks)):
                mask = proposals.rle_decode(geo_masks[j])
                regions.append(prompting.Region(box=proposals.box_from_mask(mask), mask=mask))
        except (ValueError, TypeError, KeyError) as exc:
            raise click.ClickException(f"bad geometry file {geometry}: {exc}")
    if not regions:
        raise click.UsageError("no regions: pass --box and/or --geometry")

    style = _build_style(sigma, thickness, line_color, fill_color, alpha, expand)
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    stem = Path(image).stem
    written = []
    for index, region in enumerate(regions):
        for k in kinds:
            rendered = prompting.render_prompt(img, region, k, style)
            if square != "auto":
                rendered = prompting.prepare_input(rendered, square, side)
            path = out_root / f"{stem}_{index}_{k.code}.png"
            imagecore.save_png(rendered, path)
            written.append(path)
    click.echo(f"wrote {len(written)} file(s) to {out_root}")


@main.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@_run_options
@_style_options
def rec(dataset, prompts, post, neg_q, grid, nms, mask_filter, backend, segmenter,
        url, seed, relation_agg, use_cache, jobs, output, fmt, strict,
        sigma, thickness, line_color, fill_color, alpha, expand, square, side):
    """Referring-expression comprehension over a rec JSONL DATASET."""
    style = _build_style(sigma, thickness, line_color, fill_color, alpha, expand)
    config = _build_config(prompts, post, style, square, side, grid, nms,
                           mask_filter, neg_q, seed, relation_agg)
    records = evalharness.load_rec_jsonl(dataset)
    needs_masks = any(k.requires_mask for k in config.kinds) or any(not r.proposals for r in records)
    scorer, seg = _build_backends(backend, segmenter, url, seed, use_cache, needs_masks)
    report = evalharness.evaluate_rec(scorer, seg, records, config, jobs=jobs)
    _finish_run(report, dataset, output, fmt, strict)


@main.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--matching", type=click.Choice(["hungarian", "argmax"]),
              default="hungarian", show_default=True,
              help="Part-to-proposal assignment mode.")
@_run_options
@_style_options
def partdet(dataset, matching, prompts, post, neg_q, grid, nms, mask_filter, backend,
            segmenter, url, seed, relation_agg, use_cache, jobs, output, fmt, strict,
            sigma, thickness, line_color, fill_color, alpha, expand, square, side):
    """Zero-shot part detection over a part JSONL DATASET."""
    style = _build_style(sigma, thickness, line_color, fill_color, alpha, expand)
    config = _build_config(prompts, post, style, square, side, grid, nms,
                           mask_filter, neg_q, seed, relation_agg, matching=matching)
    records = evalharness.load_part_jsonl(dataset)
    scorer, seg = _build_backends(backend, segmenter, url, seed, use_cache, True)
    report = evalharness.evaluate_partdet(scorer, seg, records, config, jobs=jobs)
    _finish_run(report, dataset, output, fmt, strict)


@main.command()
@click.argument("action", type=click.Choice(["stats", "clear"]))
def cache(action):
    """Inspect or clear the on-disk response cache."""
    store = backends.DiskCache(_cache_dir())
    if action == "stats":
        click.echo(json.dumps(store.stats(), sort_keys=True))
    else:
        removed = store.clear()
        click.echo(f"removed {removed} cache entr{'y' if removed == 1 else 'ies'}")


@main.command()
@click.argument("task", type=click.Choice(["rec", "part"]))
@click.option("--out-dir", type=click.Path(file_okay=False), required=True,
              help="Directory for the generated images and JSONL.")
@click.option("--count", type=int, default=None, help="Record count (default 20 rec / 10 part).")
@click.option("--seed", type=int, default=7, show_default=True)
def synth(task, out_dir, count, seed):
    """Generate a deterministic synthetic benchmark set."""
    if task == "rec":
        path = synthetic.make_rec_dataset(out_dir, count=count or 20, seed=seed)
    else:
        path = synthetic.make_part_dataset(out_dir, count=count or 10, seed=seed)
    click.echo(str(path))


if __name__ == "__main__":
    main()
