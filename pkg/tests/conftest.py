import functools
import subprocess
import sys
import threading

import numpy as np
import pytest

from tapml import models
from tapml.backends import golden, sim_native
from tapml.bundle import ModelBundle
from tapml.carver import carve_run
from tapml.graph import ComputeGraph, Node, OpKind
from tapml.rpc.server import DeviceServer
from tapml.tensor import DType, Tensor

RECIPES = sorted(models.RECIPES)


@functools.lru_cache(maxsize=None)
def built(name: str):
    return models.build(name)


@functools.lru_cache(maxsize=None)
def carved(name: str, corpus_id: str = "motto-1", passes: int = 3):
    bundle = built(name)
    feeds = models.realistic_inputs(bundle, corpus_id)
    corpus, outputs = carve_run(bundle, golden(), feeds, passes, provenance=f"corpus:{corpus_id}")
    return corpus


def single_op_bundle(kind, input_arrays, attrs=None, dtypes=None):
    """A graph with one Constant input per array feeding a single ``kind`` node."""
    nodes, weights = [], {}
    for i, arr in enumerate(input_arrays):
        dt = dtypes[i] if dtypes else DType.from_numpy(np.asarray(arr).dtype)
        t = Tensor.from_array(np.asarray(arr), dt)
        nodes.append(Node(i, OpKind.Constant, (), {"dtype": dt.label, "shape": list(t.shape)}, f"in{i}"))
        weights[i] = t
    op_id = len(nodes)
    nodes.append(Node(op_id, kind, tuple(range(op_id)), attrs or {}, "op"))
    graph = ComputeGraph(tuple(nodes), input_ids=tuple(range(op_id)), output_ids=(op_id,))
    feed = dict(weights)
    return ModelBundle(graph, {}, name=f"single-{kind.value}"), feed


@pytest.fixture
def device_server():
    """Start in-thread servers; each is shut down by a SHUTDOWN at teardown."""
    started = []

    def start(backend=None):
        srv = DeviceServer(backend or sim_native())
        th = threading.Thread(target=srv.serve_forever, daemon=True)
        th.start()
        started.append((srv, th))
        return f"127.0.0.1:{srv.port}"

    yield start
    from tapml.rpc.client import shutdown

    for srv, th in started:
        if th.is_alive():
            try:
                shutdown(f"127.0.0.1:{srv.port}", timeout=5)
            except Exception:
                pass
            th.join(5)


def spawn_server(*args, cwd=None):
    """``tapml device serve`` in a child process; returns (proc, address)."""
    proc = subprocess.Popen(
        [sys.executable, "-m", "tapml.cli", "device", "serve", "--listen", "127.0.0.1:0", *args],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
        cwd=cwd,
    )
    line = proc.stdout.readline()
    if not line.startswith("listening on "):
        proc.kill()
        raise RuntimeError(f"server did not start: {line!r} {proc.stderr.read()}")
    return proc, line.split()[-1]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
