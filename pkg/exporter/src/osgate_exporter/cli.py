import argparse
import sys

from .config import ExportConfig
from .errors import ExporterError
from .export import run_export
from .verify import run_verify


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osgate-export",
        description="Bridge detector outputs into osgate dataset containers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="run a detector and write a container")
    exp.add_argument("--config", required=True,
                     help="JSON file of ExportConfig fields")
    exp.add_argument("--out", required=True)
    exp.set_defaults(func=_cmd_export)

    ver = sub.add_parser("verify", help="validate a container and print a summary")
    ver.add_argument("path")
    ver.set_defaults(func=_cmd_verify)
    return parser


def _cmd_export(args) -> int:
    config = ExportConfig.from_json(args.config)
    stats = run_export(config, args.out)
    print(f"exported {stats.detections} detections / {stats.ground_truth} "
          f"ground-truth boxes from {stats.images} images -> {args.out}")
    if stats.skipped_low_score:
        print(f"skipped {stats.skipped_low_score} detections under the score floor")
    return 0


def _cmd_verify(args) -> int:
    return run_verify(args.path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
