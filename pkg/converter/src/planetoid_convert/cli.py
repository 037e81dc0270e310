"""``convert <dataset> <src> <dst>`` with primary-CLI exit codes (0/1/2)."""

from __future__ import annotations

import argparse
import logging
import sys

from .convert import DATASETS, ConversionError, convert


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="convert",
        description="Convert Planetoid citation files into a portable bundle directory.")
    parser.add_argument("dataset", choices=DATASETS)
    parser.add_argument("src", help="directory with the ind.<dataset>.* files")
    parser.add_argument("dst", help="bundle directory to create")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        meta = convert(args.src, args.dataset, args.dst)
    except ConversionError as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        return 2 if "missing source file" in message or "unknown dataset" in message else 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{meta['name']}: n={meta['num_nodes']} m={meta['num_features']} "
          f"k={meta['num_classes']} edges={meta['num_edges']} -> {args.dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
