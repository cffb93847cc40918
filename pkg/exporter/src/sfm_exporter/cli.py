"""Command line for exporting PyTorch checkpoints and datasets."""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportError, export_checkpoint, export_samples


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfm-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("checkpoint", help="pickled torch CNN -> SFM + manifest")
    p.add_argument("--src", required=True, help="torch.save(model) file")
    p.add_argument("--out", required=True, help="SFM output path")
    p.add_argument(
        "--input-shape", required=True, help="per-sample shape, e.g. 3,32,32"
    )
    p.add_argument("--arch-hint", default=None)
    p.add_argument("--manifest", default=None, help="manifest path (default <out>.manifest.json)")

    p = sub.add_parser("samples", help="dataset -> SFT sample file")
    p.add_argument("--src", required=True, help=".pt dict or directory of class/*.npy")
    p.add_argument("--out", required=True, help="SFT output path")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--mean", default=None, help="comma-separated per-channel mean")
    p.add_argument("--std", default=None, help="comma-separated per-channel std")
    p.add_argument("--class-count", type=int, default=None)
    return parser


def _floats(text):
    return [float(v) for v in text.split(",")] if text else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "checkpoint":
            shape = [int(v) for v in args.input_shape.split(",")]
            manifest = export_checkpoint(
                args.src,
                args.out,
                input_shape=shape,
                arch_hint=args.arch_hint,
                manifest_path=args.manifest,
            )
            print(json.dumps({"out": args.out, "tensors": manifest.tensor_count}))
        else:
            written = export_samples(
                args.src,
                args.out,
                count=args.count,
                preprocessing={"scale": args.scale, "mean": _floats(args.mean), "std": _floats(args.std)},
                seed=args.seed,
                class_count=args.class_count,
            )
            print(json.dumps({"out": args.out, "count": written}))
    except (ExportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
