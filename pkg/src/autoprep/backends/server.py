"""Stdio entry point that serves a backend set over the framed protocol.

Usage:

    python -m autoprep.backends.server --spec backends.json

The spec file has the same shape accepted by ``backend_set_from_spec``.
Real model runtimes can reimplement this loop in any language; the wire
format is the only contract.
"""

from __future__ import annotations

import argparse
import sys

from . import load_backend_spec
from .remote import serve_backend_set


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="autoprep-backend-server")
    parser.add_argument("--spec", required=True, help="JSON backend-set description")
    args = parser.parse_args(argv)
    backends = load_backend_spec(args.spec)
    serve_backend_set(backends, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
