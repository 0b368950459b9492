"""Command line: extract layer-wise encoder features into an LFB bundle."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import ExtractorConfig, extract_layers
from .models import ModelLoadError, UnsupportedModelError, REGISTRY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfb-extract")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="dump layer-wise features to a bundle")
    p.add_argument("--model", required=True, choices=sorted(REGISTRY))
    p.add_argument("--images", required=True, help="image file or directory")
    p.add_argument("--concepts", default="", help="comma-separated concept labels")
    p.add_argument("--prototype-file", default=None,
                   help="JSON with concept prototype embeddings")
    p.add_argument("--layers", default="all",
                   help='comma-separated model stages or "all"')
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--pretrained", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _collect_images(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
    return sorted(p for p in root.iterdir() if p.suffix.lower() in exts)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        model_id=args.model,
        images=_collect_images(Path(args.images)),
        out_path=Path(args.out),
        concepts=[c.strip() for c in args.concepts.split(",") if c.strip()],
        prototype_file=Path(args.prototype_file) if args.prototype_file else None,
        layer_selection=(
            None if args.layers == "all" else [int(x) for x in args.layers.split(",")]
        ),
        image_size=args.image_size,
        pretrained=args.pretrained,
        seed=args.seed,
    )
    try:
        path = extract_layers(config)
    except (UnsupportedModelError, ModelLoadError) as exc:
        print(f"lfb-extract: error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
