"""CLI: `export` turns an image-folder tree into an .spffemb file;
`verify` re-checks any embedding file with the independent parser.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportJob, export
from .fileio import verify


def cmd_export(args: argparse.Namespace) -> int:
    job = ExportJob(
        root=args.root,
        out=args.out,
        backbone=args.backbone,
        weights=args.weights,
        image_size=args.image_size,
        batch_size=args.batch_size,
        seed=args.seed,
        split_fractions=tuple(args.split_fractions),
    )
    path = export(job)
    print(f"wrote {path}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    report = verify(args.path)
    print(report.summary())
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spff-export",
        description="Frozen ViT embedding exporter for .spffemb datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="embed an image-folder tree")
    p.add_argument("--root", required=True, help="class-per-subfolder image directory")
    p.add_argument("--out", required=True, help="output .spffemb path")
    p.add_argument("--backbone", default="vit_s16", choices=("vit_s16", "vit_b16"))
    p.add_argument("--weights", default=None,
                   help="backbone state-dict file; omitted = deterministic seeded init")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-fractions", nargs=3, type=float, default=[0.7, 0.1, 0.2],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="independently re-parse an embedding file")
    p.add_argument("path")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
