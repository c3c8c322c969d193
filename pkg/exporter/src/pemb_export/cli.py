"""Command line front end: `pemb-export manifest.json`."""

import argparse
import json
import sys

from .export import ExportError, ExportManifest, export_embeddings

_FIELDS = {"model", "output", "modality", "batch_size", "images", "caption_file", "dim"}


def manifest_from_json(path: str) -> ExportManifest:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError("manifest must be a JSON object")
    unknown = set(data) - _FIELDS
    if unknown:
        raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
    return ExportManifest(**data)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pemb-export",
        description="run an encoder over images or captions and write a PEMB file",
    )
    parser.add_argument("manifest", help="path to a JSON export manifest")
    args = parser.parse_args(argv)
    try:
        report = export_embeddings(manifest_from_json(args.manifest))
    except (ExportError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def entry() -> None:
    sys.exit(main())
