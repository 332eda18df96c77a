"""Command line front end: ``embed-exporter export`` and ``verify``.

Exit codes follow the retrieval CLI's convention: 0 success, 2 usage
problems or missing files, 3 bad data (unreadable model, malformed
input, failed verification).
"""

from __future__ import annotations

import argparse
import logging
import sys

from embed_exporter.core import ExporterError, ExportJob, export, verify


def _parse_layers(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"layers must be comma-separated integers, got {text!r}"
        )


def _add_job_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="TSV of id<TAB>text rows")
    p.add_argument("--model", required=True, help="model directory or hub id")
    p.add_argument(
        "--layers",
        type=_parse_layers,
        default=None,
        help="comma-separated 1-based layer indices (default 2,4,6,8,10,12)",
    )
    p.add_argument(
        "--max-tokens",
        type=int,
        default=180,
        help="content subwords kept per text (use 32 for queries)",
    )
    p.add_argument("--out", required=True, help="UHDE file to write / check")
    p.add_argument("--batch-size", type=int, default=16)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-exporter",
        description="Export per-layer transformer token embeddings to UHDE files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="run the model and write embeddings")
    _add_job_flags(p_export)

    p_verify = sub.add_parser("verify", help="check a written file")
    _add_job_flags(p_verify)
    p_verify.add_argument(
        "--sample-count",
        type=int,
        default=10,
        help="records to recompute and compare (0: header and structure only)",
    )
    return parser


def _job(args: argparse.Namespace) -> ExportJob:
    kwargs = {}
    if args.layers is not None:
        kwargs["layers"] = args.layers
    return ExportJob(
        input_path=args.input,
        model_id=args.model,
        out_path=args.out,
        max_tokens=args.max_tokens,
        batch_size=args.batch_size,
        **kwargs,
    )


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        job = _job(args)
        if args.command == "export":
            written = export(job)
            print(f"records\t{written}")
        else:
            report = verify(job, args.sample_count)
            print(f"records\t{report.record_count}")
            print(f"layers\t{report.layer_count}")
            print(f"hidden\t{report.hidden_size}")
            if report.max_deviation is None:
                print("checked\tstructure-only")
            else:
                print(f"sampled\t{len(report.sampled_ids)}")
                print(f"max_deviation\t{report.max_deviation:.3e}")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
