"""Command line entry point: ``reml run|eval|serve|index-build|client``.

Exit codes: 0 success, 1 other failure, 2 invalid config or input,
3 training diverged, 4 listen address in use.
"""
from __future__ import annotations

import argparse
import asyncio
import errno
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, bundled_quickstart, load_config
from .core import Collection, Document, RemlError
from .optim import TrainingDiverged

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PORT = 0, 1, 2, 3, 4


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config or bundled_quickstart())
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_run(args: argparse.Namespace) -> int:
    from .experiment import run, summary_table

    cfg = _config(args)
    try:
        _, summary = run(cfg, args.out_dir)
    except TrainingDiverged as exc:
        _err(f"error: {exc}")
        return EXIT_DIVERGED
    print(summary_table(summary))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from .experiment import build, evaluate, summary_table
    from .models import load_checkpoint

    cfg = _config(args)
    out = Path(args.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    exp = build(cfg)
    header = load_checkpoint(ckpt, exp.model, exp.access)
    lam = header.get("hyperparameters", {}).get("lambda")
    if lam is not None:
        exp.model.lam = lam
    out.mkdir(parents=True, exist_ok=True)
    print(summary_table(evaluate(exp, out)))
    return EXIT_OK


def read_corpus(path: str | Path) -> list[Document]:
    """Documents, one per line; raises ConfigError naming the first bad line."""
    docs: list[Document] = []
    dim: int | None = None
    first = 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = Document.from_dict(json.loads(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise ConfigError(str(path), [(n, "document", str(exc))]) from None
            if doc.vector is not None:
                if dim is None:
                    dim, first = len(doc.vector), n
                elif len(doc.vector) != dim:
                    raise ConfigError(
                        str(path), [(n, "vector", f"dimension {len(doc.vector)} differs from {dim} (line {first})")]
                    )
            docs.append(doc)
    return docs


def cmd_index_build(args: argparse.Namespace) -> int:
    from .retrieval import write_snapshot

    docs = read_corpus(args.corpus)
    dims = [len(d.vector) for d in docs if d.vector is not None]
    dimension = dims[0] if dims else args.dimension
    if args.dimension is not None and dims and dims[0] != args.dimension:
        _err(f"{args.corpus}: corpus dimension {dims[0]} differs from --dimension {args.dimension}")
        return EXIT_CONFIG
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        _err(f"{args.corpus}: duplicate document ids")
        return EXIT_CONFIG
    coll = Collection(dimension or 16, docs)
    out = Path(args.out) if args.out else Path(args.out_dir) / "index.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_snapshot(out, coll, "dense" if len(dims) == len(docs) else "mixed")
    print(f"wrote {len(coll)} documents to {out}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import ServiceState, create_app, parse_listen, serve_forever
    from .storage import StorageHandler

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    svc = cfg.service
    listen = args.listen or os.environ.get("REML_LISTEN") or svc.listen
    index = os.environ.get("REML_INDEX") or svc.index
    log_path = svc.log or (f"{index}.log" if index else None)
    host, port = parse_listen(listen)
    storage = StorageHandler.open(svc.dimension, svc.storage.policy(), index, log_path)
    state = ServiceState(storage, svc.scoring, svc.personalization_rate)

    def ready(p: int) -> None:
        print(f"listening on {host}:{p}", flush=True)

    try:
        if args.transport == "http":
            import socket

            import uvicorn

            with socket.socket() as probe:  # uvicorn exits instead of raising on a busy port
                probe.bind((host, port))
            ready(port)
            uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
        else:
            asyncio.run(serve_forever(state, host, port, ready))
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            _err(f"error: {listen} is already in use")
            return EXIT_PORT
        raise
    finally:
        state.close()
    return EXIT_OK


def cmd_client(args: argparse.Namespace) -> int:
    from .service import ServiceClient, parse_listen

    host, port = parse_listen(args.listen or os.environ.get("REML_LISTEN") or "127.0.0.1:7341")
    body = json.loads(args.body) if args.body else None
    with ServiceClient(host, port) as c:
        reply = c.request(args.op, args.model_id, body, args.session_id)
    print(json.dumps(reply, separators=(",", ":")))
    return EXIT_OK if reply.get("ok") else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (defaults to the bundled quickstart)")
    common.add_argument("--seed", type=int, help="overrides task and optimization seeds")
    common.add_argument("--out-dir", default="reml-out", help="directory for outputs")

    p = argparse.ArgumentParser(prog="reml", description="retrieval-enhanced ML experiments and service")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train and evaluate from a config").set_defaults(fn=cmd_run)
    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    ev.add_argument("--checkpoint", help="defaults to OUT_DIR/checkpoint.json")
    ev.set_defaults(fn=cmd_eval)
    sv = sub.add_parser("serve", parents=[common], help="run the information access service")
    sv.add_argument("--listen", help="host:port (overrides REML_LISTEN and the config)")
    sv.add_argument("--transport", choices=("ndjson", "http"), default="ndjson")
    sv.set_defaults(fn=cmd_serve)
    ib = sub.add_parser("index-build", parents=[common], help="build an index snapshot from a corpus")
    ib.add_argument("corpus", help="file with one serialized document per line")
    ib.add_argument("out", nargs="?", help="snapshot path (defaults to OUT_DIR/index.jsonl)")
    ib.add_argument("--dimension", type=int, help="dimension recorded for an empty corpus")
    ib.set_defaults(fn=cmd_index_build)
    cl = sub.add_parser("client", parents=[common], help="send one request to a running service")
    cl.add_argument("op", choices=("query", "store", "feedback", "stats"))
    cl.add_argument("--model-id", default="cli")
    cl.add_argument("--session-id")
    cl.add_argument("--body", help="JSON body")
    cl.add_argument("--listen", help="host:port of the service")
    cl.set_defaults(fn=cmd_client)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for line in exc.lines():
            _err(line)
        return EXIT_CONFIG
    except (RemlError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
