"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 usage or configuration error,
3 transport or runtime error. A ``tapml.json`` in the working directory (or
the file named by ``--config``) may pre-fill any flag; flags win. The file
holds flag names as keys, either at top level or under a command name.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

from . import models
from .backends import PROFILES, make_backend
from .bundle import load_model, save_model
from .carver import carve_run, load_corpus, save_corpus
from .errors import (
    ConnectionLost,
    DigestMismatch,
    FaultConfigError,
    NodeError,
    ParseError,
    ChecksumMismatch,
    ProtocolError,
    RemoteError,
    TapmlError,
)
from .executor import run_model
from .faults import load_faults
from .offloader import ARGMAX, HALT, SCAN, TENSOR, TolerancePolicy, gradual_offload

CONFIG_FILE = "tapml.json"

OK, FAILED, USAGE, RUNTIME = 0, 1, 2, 3

# Every flag a config file may pre-fill, with its built-in default.
DEFAULTS: dict[str, dict[str, Any]] = {
    "build": {"recipe": None, "out": None, "seed": 7},
    "carve": {"model": None, "inputs": None, "passes": 1, "out": None, "backend": "golden-f64", "profile": "pc", "dedup": False},
    "migrate": {
        "model": None,
        "corpus": None,
        "target": None,
        "source": "golden-f64",
        "profile": "pc",
        "policy": HALT,
        "oracle": TENSOR,
        "granularity": "kind",
        "rtol": None,
        "atol": None,
        "faults": None,
        "report": None,
    },
    "localize": {
        "model": None,
        "corpus": None,
        "target": None,
        "source": "golden-f64",
        "profile": "pc",
        "oracle": TENSOR,
        "rtol": None,
        "atol": None,
        "faults": None,
        "truth": None,
        "report": None,
    },
    "run": {"model": None, "inputs": None, "backend": None, "profile": "pc", "faults": None},
    "serve": {"listen": "127.0.0.1:9090", "backend": "sim-native", "profile": "pc", "faults": None},
    "shutdown": {"address": "127.0.0.1:9090"},
}
REQUIRED = {
    "build": ("recipe", "out"),
    "carve": ("model", "inputs", "out"),
    "migrate": ("model", "corpus", "target", "report"),
    "localize": ("model", "corpus", "target", "report"),
    "run": ("model", "inputs", "backend"),
    "serve": (),
    "shutdown": (),
}


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    # Every option defaults to None so that config-file values can fill the gaps.
    p = argparse.ArgumentParser(prog="tapml", description="Carve operator tests, migrate models between backends, localize faulty kernels.")
    p.add_argument("--config", help=f"config file pre-filling flags (default ./{CONFIG_FILE} if present)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a builtin model recipe into a bundle directory")
    b.add_argument("--recipe", choices=sorted(models.RECIPES))
    b.add_argument("--out")
    b.add_argument("--seed", type=int)

    c = sub.add_parser("carve", help="record per-operator tests from end-to-end runs on the source backend")
    c.add_argument("--model")
    c.add_argument("--inputs", choices=models.CORPUS_IDS)
    c.add_argument("--passes", type=int)
    c.add_argument("--out")
    c.add_argument("--backend")
    c.add_argument("--profile", choices=sorted(PROFILES))
    c.add_argument("--dedup", action="store_const", const=True)

    for name, helptext in (("migrate", "offload operator kinds to the target one at a time"), ("localize", "scan every kind and list the buggy ones")):
        m = sub.add_parser(name, help=helptext)
        m.add_argument("--model")
        m.add_argument("--corpus")
        m.add_argument("--target", help="golden-f64, sim-native or remote:HOST:PORT")
        m.add_argument("--source", help="oracle backend for model-wise runs")
        m.add_argument("--profile", choices=sorted(PROFILES))
        if name == "migrate":
            m.add_argument("--policy", choices=(HALT, SCAN))
            m.add_argument("--granularity", choices=("kind", "node"))
        m.add_argument("--oracle", choices=(TENSOR, ARGMAX))
        m.add_argument("--rtol", type=float)
        m.add_argument("--atol", type=float)
        m.add_argument("--faults", help="faults JSON injected into a local target")
        if name == "localize":
            m.add_argument("--truth", help="faults JSON whose enabled kinds are the ground truth")
        m.add_argument("--report")

    r = sub.add_parser("run", help="run a model end to end and print output digests")
    r.add_argument("--model")
    r.add_argument("--inputs", choices=models.CORPUS_IDS)
    r.add_argument("--backend")
    r.add_argument("--profile", choices=sorted(PROFILES))
    r.add_argument("--faults")

    d = sub.add_parser("device", help="device server commands")
    dsub = d.add_subparsers(dest="device_command", required=True)
    s = dsub.add_parser("serve", help="host a backend for remote hosts until SHUTDOWN")
    s.add_argument("--listen", help="HOST:PORT (port 0 picks a free one)")
    s.add_argument("--backend")
    s.add_argument("--profile", choices=sorted(PROFILES))
    s.add_argument("--faults")
    sd = dsub.add_parser("shutdown", help="ask a device server to exit")
    sd.add_argument("--address")
    return p


def _load_config(path: str | None) -> dict:
    if path is None:
        if not Path(CONFIG_FILE).exists():
            return {}
        path = CONFIG_FILE
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path}: invalid JSON at offset {e.pos}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def resolve(command: str, args: argparse.Namespace, file_cfg: dict) -> dict:
    """Flags over command section over top-level file keys over defaults."""
    defaults = DEFAULTS[command]
    section = file_cfg.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {command!r} must be an object")
    cfg = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
        elif key in section:
            cfg[key] = section[key]
        elif key in file_cfg and not isinstance(file_cfg[key], dict):
            cfg[key] = file_cfg[key]
        else:
            cfg[key] = default
    missing = [k for k in REQUIRED[command] if cfg[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + k for k in missing))
    return cfg


def _faults(path):
    return None if path is None else load_faults(path)


def _write_report(doc: dict, path: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_build(cfg: dict) -> int:
    bundle = models.build(cfg["recipe"], seed=cfg["seed"])
    save_model(bundle, cfg["out"])
    print(f"built {bundle.name}: {len(bundle.graph.nodes)} nodes, digest {bundle.digest()[:16]} -> {cfg['out']}")
    return OK


def cmd_carve(cfg: dict) -> int:
    if cfg["passes"] < 1:
        raise UsageError("--passes must be >= 1")
    bundle = load_model(cfg["model"])
    source = make_backend(cfg["backend"], cfg["profile"])
    feeds = models.realistic_inputs(bundle, cfg["inputs"])
    corpus, _ = carve_run(bundle, source, feeds, cfg["passes"], provenance=f"corpus:{cfg['inputs']}", dedup=cfg["dedup"])
    save_corpus(corpus, cfg["out"])
    print(f"carved {corpus.count()} tests from {cfg['passes']} pass(es) in {corpus.carve_secs:.3f}s -> {cfg['out']}")
    return OK


def _offload(cfg: dict, command: str) -> int:
    bundle = load_model(cfg["model"])
    corpus = load_corpus(cfg["corpus"], bundle)
    tol = TolerancePolicy(cfg["rtol"], cfg["atol"])
    source = make_backend(cfg["source"], cfg["profile"])
    target = make_backend(cfg["target"], cfg["profile"], _faults(cfg["faults"]))
    config = dict(cfg, command=command, tolerances=tol.to_json())
    try:
        if command == "localize":
            report = gradual_offload(bundle, source, target, corpus, tol, SCAN, cfg["oracle"], config=config)
            if cfg["truth"] is not None:
                report.truth = sorted(k.value for k in load_faults(cfg["truth"]).kinds())
        else:
            report = gradual_offload(
                bundle, source, target, corpus, tol, cfg["policy"], cfg["oracle"], cfg["granularity"], config=config
            )
    finally:
        if hasattr(target, "close"):
            target.close()
    _write_report(report.to_json(), cfg["report"])
    print(report.summary())
    print(f"report -> {cfg['report']}")
    if command == "localize" and report.truth is not None:
        return OK if not report.fp and not report.fn else FAILED
    return OK if not report.buggy else FAILED


def cmd_run(cfg: dict) -> int:
    bundle = load_model(cfg["model"])
    backend = make_backend(cfg["backend"], cfg["profile"], _faults(cfg["faults"]))
    try:
        for i, feed in enumerate(models.realistic_inputs(bundle, cfg["inputs"])):
            t0 = time.perf_counter()
            outs = run_model(bundle, backend, feed)
            secs = time.perf_counter() - t0
            digests = " ".join(f"{oid}:{t.sha256()[:16]}" for oid, t in sorted(outs.items()))
            print(f"pass {i}: {digests} ({secs:.3f}s)")
    finally:
        if hasattr(backend, "close"):
            backend.close()
    return OK


def cmd_serve(cfg: dict) -> int:
    from .rpc.server import serve

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    serve(cfg["listen"], cfg["backend"], cfg["profile"], _faults(cfg["faults"]), ready=ready)
    print("shutdown requested, exiting")
    return OK


def cmd_shutdown(cfg: dict) -> int:
    from .rpc.client import shutdown

    shutdown(cfg["address"])
    print(f"server at {cfg['address']} acknowledged shutdown")
    return OK


COMMANDS = {
    "build": cmd_build,
    "carve": cmd_carve,
    "migrate": lambda cfg: _offload(cfg, "migrate"),
    "localize": lambda cfg: _offload(cfg, "localize"),
    "run": cmd_run,
    "serve": cmd_serve,
    "shutdown": cmd_shutdown,
}

TRANSPORT_ERRORS = (ConnectionLost, RemoteError, ProtocolError, OSError)
CONFIG_ERRORS = (UsageError, ParseError, ChecksumMismatch, DigestMismatch, FaultConfigError, ValueError)


def _exit_code(e: BaseException) -> int:
    cause = e.cause if isinstance(e, NodeError) else e
    if isinstance(cause, TRANSPORT_ERRORS):
        return RUNTIME
    if isinstance(e, CONFIG_ERRORS):
        return USAGE
    return RUNTIME


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    command = args.device_command if args.command == "device" else args.command
    try:
        cfg = resolve(command, args, _load_config(args.config))
        return COMMANDS[command](cfg)
    except (TapmlError, ValueError, OSError, UsageError) as e:
        code = _exit_code(e)
        print(f"tapml {command}: {type(e).__name__}: {e}", file=sys.stderr)
        if isinstance(e, RemoteError) or isinstance(getattr(e, "cause", None), RemoteError):
            remote = e if isinstance(e, RemoteError) else e.cause
            for frame in remote.remote_context[:8]:
                print(f"  remote {frame.get('site')}: {frame.get('detail')}", file=sys.stderr)
        return code
    except KeyboardInterrupt:
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
