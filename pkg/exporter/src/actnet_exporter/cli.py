"""One-shot export tool: images + labels CSV -> ACTF files + manifest."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import DEFAULT_LAYERS, ExportConfig, export


def build_parser():
    parser = argparse.ArgumentParser(
        prog="actnet-export",
        description="Export backbone feature maps for a directory of images",
    )
    parser.add_argument("--images", required=True, help="directory of image files named <id>.<ext>")
    parser.add_argument("--labels", required=True, help="CSV with columns id,class,split")
    parser.add_argument("--out", required=True, help="output directory for ACTF files + manifest")
    parser.add_argument("--model", default="resnet18", help=f"backbone ({', '.join(DEFAULT_LAYERS)})")
    parser.add_argument("--layers", default=None,
                        help="comma-separated tap module names (default: backbone's last two blocks)")
    parser.add_argument("--long-side", type=int, default=1024,
                        help="cap on the image long side in pixels, aspect preserved")
    parser.add_argument("--weights", choices=["pretrained", "none"], default="pretrained",
                        help="'none' uses a randomly initialised backbone (format smoke tests)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    cfg = ExportConfig(
        model_name=args.model,
        layer_names=tuple(args.layers.split(",")) if args.layers else (),
        image_long_side=args.long_side,
        output_dir=args.out,
        weights=args.weights,
    )
    try:
        manifest = export(args.images, args.labels, cfg)
    except (ValueError, OSError) as exc:
        logging.getLogger("actnet-export").error("%s", exc)
        return 1
    print(manifest)
    return 0


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
