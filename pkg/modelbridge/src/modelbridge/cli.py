"""CLI: serve the model endpoints, convert upstream datasets."""

from __future__ import annotations

import click

from .convert import ConversionError, convert_paco, convert_rec
from .server import ServerConfig, serve


@click.group()
def main():
    """Model server and dataset converters."""


@main.command("serve")
@click.option("--scorer", default="builtin", show_default=True,
              help="Scorer tag: builtin or clip:<checkpoint>.")
@click.option("--segmenter", default="builtin", show_default=True,
              help="Segmenter tag: builtin or sam:<checkpoint>.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8731, show_default=True)
@click.option("--device", default="cpu", show_default=True)
def serve_cmd(scorer, segmenter, host, port, device):
    """Run the embedding/segmentation HTTP service."""
    serve(ServerConfig(scorer=scorer, segmenter=segmenter, host=host,
                       port=port, device=device))


@main.command("convert-rec")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--split", default=None, help="Keep only entries of this split.")
@click.option("--proposal-source", type=click.Choice(["gt", "detector-file"]),
              default="gt", show_default=True)
@click.option("--detector-file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Image -> boxes JSON map for detector proposals.")
@click.option("--image-root", default="", help="Prefix joined onto image paths.")
def convert_rec_cmd(source, output, split, proposal_source, detector_file, image_root):
    """Convert a referring-expression source JSON into rec JSONL."""
    try:
        count = convert_rec(source, output, split=split,
                            proposal_source=proposal_source,
                            detector_file=detector_file, image_root=image_root)
    except ConversionError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {count} records to {output}")


@main.command("convert-paco")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--image-root", default="", help="Prefix joined onto image paths.")
def convert_paco_cmd(source, output, image_root):
    """Convert part-annotation instance JSON into part JSONL."""
    try:
        count = convert_paco(source, output, image_root=image_root)
    except ConversionError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {count} records to {output}")


if __name__ == "__main__":
    main()
