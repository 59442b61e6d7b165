"""``embed-service`` entry point: serve the HTTP API or run batch mode."""

from __future__ import annotations

import argparse
import sys

from .backends import parse_model_args
from .batch import KINDS, run_batch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-service", description=__doc__)
    parser.add_argument(
        "--model",
        action="append",
        required=True,
        metavar="NAME=SPEC",
        help="register a model, e.g. default=hash:256 or minilm=hf:sentence-transformers/all-MiniLM-L6-v2",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8901)
    parser.add_argument("--auth-token", help="require this static bearer token on embed routes")
    parser.add_argument(
        "--batch",
        nargs=2,
        metavar=("IN_JSONL", "OUT_JSONL"),
        help="embed a JSONL file instead of serving; writes the precomputed format",
    )
    parser.add_argument("--batch-model", help="registry name used in batch mode (default: first)")
    parser.add_argument("--kind", choices=(*KINDS, "both"), default="both",
                        help="which embedding kinds batch mode writes")
    parser.add_argument("--no-normalize", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        registry = parse_model_args(ns.model)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if ns.batch:
        in_path, out_path = ns.batch
        model = ns.batch_model or next(iter(registry))
        kinds = KINDS if ns.kind == "both" else (ns.kind,)
        try:
            stats = run_batch(in_path, out_path, registry, model, kinds,
                              normalize=not ns.no_normalize)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"embedded {stats['records']} records -> {stats['written']} rows "
              f"({stats['skipped']} skipped)")
        return 0

    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(registry, auth_token=ns.auth_token), host=ns.host, port=ns.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
