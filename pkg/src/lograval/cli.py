"""Command-line client.

Each subcommand builds a request from ``--config`` plus flags and runs it
in-process, or against a running service with ``--server URL``. Exit codes:
0 success, 2 config error, 3 artifact mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from . import service
from .errors import ConfigError, LograError
from .schemas import ErrorResponse, EvalRequest, ExtractRequest, QueryRequest, TrainRequest


def _ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lograval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--workdir", help="override the artifact directory")
        p.add_argument("--server", help="send the request to a running service at this URL")

    p = sub.add_parser("train", help="train the model and write a checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)

    p = sub.add_parser("extract", help="write projections, statistics and the gradient store")
    common(p)
    p.add_argument("--k-in", type=int)
    p.add_argument("--k-out", type=int)
    p.add_argument("--init", choices=["random", "pca"])
    p.add_argument("--precision", choices=["float32", "float64"])

    p = sub.add_parser("query", help="rank stored train examples for queries")
    common(p)
    p.add_argument("--mode", default="l_relatif", choices=["dot", "influence", "l_relatif", "cosine"])
    p.add_argument("-k", type=int, default=10)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--test-ids", type=_ids, help="comma-separated test indices (default: all)")
    group.add_argument("--train-ids", type=_ids, help="query training examples instead")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", help="write the report here instead of stdout")

    p = sub.add_parser("eval", help="LDS and brittleness for valuation methods")
    common(p)
    p.add_argument("--methods", type=_names, help="comma-separated method names")
    p.add_argument("--subsets", type=int, help="number of LDS subsets")
    p.add_argument("--workers", type=int, help="retraining worker processes")
    p.add_argument("--output-dir")

    p = sub.add_parser("inspect", help="print the header of an artifact file")
    p.add_argument("path")
    p.add_argument("--server")
    return parser


def _overrides(args) -> dict:
    out: dict = {}

    def put(section, key, value):
        if value is not None:
            (out.setdefault(section, {}) if section else out)[key] = value

    put(None, "seed", args.seed)
    put(None, "workdir", args.workdir)
    if args.command == "train":
        put("train", "epochs", args.epochs)
        put("train", "learning_rate", args.learning_rate)
    elif args.command == "extract":
        put("projection", "k_in", args.k_in)
        put("projection", "k_out", args.k_out)
        put("projection", "init", args.init)
        put("store", "precision", args.precision)
    elif args.command == "eval":
        put("eval", "subset_count", args.subsets)
        put("eval", "workers", args.workers)
    return out


def _document(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return doc


def build_request(args):
    base = {"config": _document(args.config), "overrides": _overrides(args)}
    if args.command == "train":
        return TrainRequest(**base)
    if args.command == "extract":
        return ExtractRequest(**base)
    if args.command == "query":
        return QueryRequest(
            **base, mode=args.mode, k=args.k, test_ids=args.test_ids,
            train_ids=args.train_ids, workers=args.workers, output=args.output,
        )
    return EvalRequest(**base, methods=args.methods, output_dir=args.output_dir)


class RemoteError(Exception):
    def __init__(self, body: ErrorResponse):
        super().__init__(body.message)
        self.body = body


def _remote(server: str, command: str, request=None, params=None) -> dict:
    import httpx

    url = server.rstrip("/") + "/" + command
    try:
        if request is None:
            resp = httpx.get(url, params=params, timeout=None)
        else:
            resp = httpx.post(url, json=request.model_dump(), timeout=None)
    except httpx.HTTPError as exc:
        raise RemoteError(ErrorResponse(error_kind="connection", message=str(exc), exit_code=1))
    if resp.status_code == 200:
        return resp.json()
    try:
        body = ErrorResponse(**resp.json())
    except (ValueError, TypeError, ValidationError):
        code = 2 if resp.status_code == 422 else 1
        body = ErrorResponse(error_kind="http", message=resp.text, exit_code=code)
    raise RemoteError(body)


_LOCAL = {
    "train": service.run_train,
    "extract": service.run_extract,
    "query": service.run_query,
    "eval": service.run_eval,
}


def dispatch(args) -> dict:
    if args.command == "inspect":
        if args.server:
            return _remote(args.server, "inspect", params={"path": args.path})
        return service.run_inspect(args.path).model_dump()
    request = build_request(args)
    if args.server:
        return _remote(args.server, args.command, request)
    return _LOCAL[args.command](request).model_dump()


def _emit(args, result: dict):
    if args.command == "query" and not args.output:
        sys.stdout.write(result["report"])
        return
    if args.command == "query":
        result = {k: v for k, v in result.items() if k != "report"}
    if args.command == "eval":
        result = result["summary"]
    if args.command == "inspect":
        result = result["header"]
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = dispatch(args)
    except ValidationError as exc:
        print(f"lograval: config error: {exc}", file=sys.stderr)
        return 2
    except LograError as exc:
        print(f"lograval: {exc.kind} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except RemoteError as exc:
        print(f"lograval: {exc.body.error_kind} error: {exc.body.message}", file=sys.stderr)
        return exc.body.exit_code
    _emit(args, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
