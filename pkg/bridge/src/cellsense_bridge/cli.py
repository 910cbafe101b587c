"""Bridge command line: export stores and serve the local endpoint.

    bridge export --model M --in sentences.jsonl --out store.embs.jsonl
    bridge serve --model M --port P
"""

from __future__ import annotations

import argparse
import sys

from .encoders import ModelLoadError
from .export import BridgeJob, export_embeddings
from .server import DEFAULT_MAX_BATCH, serve_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridge", description="cellsense encoder bridge")
    sub = parser.add_subparsers(dest="command", required=True)

    export = sub.add_parser("export", help="embed a sentences file into a store")
    export.add_argument("--model", required=True, help="hash:<dim>[:<seed>] or a sentence-transformers name")
    export.add_argument("--in", dest="sentences", required=True, help="sentences JSONL")
    export.add_argument("--out", dest="store", required=True, help="output .embs.jsonl store")
    export.add_argument("--batch-size", type=int, default=32)
    export.add_argument("--device", default=None)
    export.add_argument("--context-report", action="store_true",
                        help="write a sidecar with true-tokenizer in-context gene counts")

    serve = sub.add_parser("serve", help="serve the embeddings HTTP protocol locally")
    serve.add_argument("--model", required=True)
    serve.add_argument("--port", type=int, required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--max-batch", type=int, default=DEFAULT_MAX_BATCH)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            job = BridgeJob(
                model=args.model,
                sentences_path=args.sentences,
                store_path=args.store,
                batch_size=args.batch_size,
                device=args.device,
                context_report=args.context_report,
            )
            written, dim = export_embeddings(job)
            print(f"wrote {written} embeddings (dim {dim}) to {args.store}")
            return 0
        if args.command == "serve":
            serve_embeddings(args.model, args.port, host=args.host, max_batch=args.max_batch)
            return 0
    except ModelLoadError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
