"""Command line entry point.

    embed-export export --input corpus.csv --format csv --out agnews.fstc \
        [--encoder distilbert-base-nli-stsb-mean-tokens] [--max-length 32] \
        [--batch-size 64]

The encoder cache directory can be overridden with EMBED_EXPORT_CACHE.
Use ``--encoder debug-hash`` for a deterministic offline dry run.
"""

from __future__ import annotations

import argparse
import os
import sys

from .exporter import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_ENCODER,
    DEFAULT_MAX_LENGTH,
    EncoderUnavailableError,
    export_corpus,
    load_encoder,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ENCODER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="encode a corpus and write a dataset file")
    exp.add_argument("--input", required=True)
    exp.add_argument("--format", choices=("csv", "jsonl"), required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--encoder", default=DEFAULT_ENCODER)
    exp.add_argument("--max-length", type=int, default=DEFAULT_MAX_LENGTH)
    exp.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not os.path.exists(args.input):
        print(f"error: input file {args.input!r} does not exist", file=sys.stderr)
        return EXIT_INPUT
    try:
        encoder = load_encoder(
            args.encoder, args.max_length, cache_dir=os.environ.get("EMBED_EXPORT_CACHE")
        )
    except EncoderUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENCODER
    try:
        report = export_corpus(
            args.input, args.format, encoder, args.out, batch_size=args.batch_size
        )
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(
        f"wrote {report.out_path} ({report.n} rows, dim {report.d}, "
        f"{report.skipped_rows} rows skipped)"
    )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
