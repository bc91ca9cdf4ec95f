"""Command-line launcher: `prism-sidecar --host 0.0.0.0 --port 8800`."""

from __future__ import annotations

import argparse
import os

import uvicorn

from prism_sidecar.app import create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="prism-sidecar")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8800)
    parser.add_argument(
        "--model",
        default=os.environ.get("PRISM_SIDECAR_MODEL"),
        help="local HuggingFace causal-LM path or hub id "
        "(default: built-in pinned tiny model)",
    )
    args = parser.parse_args(argv)
    uvicorn.run(create_app(args.model), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
