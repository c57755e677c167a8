"""Walks a bundle's node list, dispatching each node to a backend."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

from .bundle import ModelBundle
from .errors import KernelError, NodeError
from .graph import Node, OpKind
from .tensor import Tensor

HOST = "source"

# (node, inputs, outputs) after a node ran
Observer = Callable[[Node, list[Tensor], list[Tensor]], None]


@dataclass
class TransferStats:
    """Bytes copied across the source/target boundary."""

    bytes: int = 0
    copies: int = 0

    def add(self, t: Tensor) -> None:
        self.bytes += t.nbytes
        self.copies += 1


def bind_payloads(bundle: ModelBundle, inputs: Mapping[int, Tensor]) -> dict[int, Tensor]:
    g = bundle.graph
    missing = set(g.input_ids) - set(inputs)
    if missing:
        raise KernelError(f"missing model inputs for node ids {sorted(missing)}")
    bound = dict(bundle.weights)
    for i in g.input_ids:
        t = inputs[i]
        n = g.node(i)
        want = (n.attrs["dtype"], tuple(n.attrs["shape"]))
        if (t.dtype.label, t.shape) != want:
            raise KernelError(f"input {i} ({n.name}) is {t.dtype}{list(t.shape)}, expected {want[0]}{list(want[1])}")
        bound[i] = t
    return bound


def execute(
    bundle: ModelBundle,
    inputs: Mapping[int, Tensor],
    place: Callable[[Node], tuple[str, object]],
    observer: Observer | None = None,
    transfers: TransferStats | None = None,
) -> dict[int, Tensor]:
    """Run the graph once; ``place(node)`` returns (placement label, backend).

    Weights and model inputs start on the host (``source``) side; values
    consumed on the other side, and outputs produced away from the host,
    are counted in ``transfers``.
    """
    payloads = bind_payloads(bundle, inputs)
    values: dict[int, Tensor] = {}
    where: dict[int, str] = {}
    for node in bundle.graph.nodes:
        label, backend = place(node)
        if node.kind is OpKind.Constant:
            args = [payloads[node.id]]
            origins = [HOST]
        else:
            args = [values[i] for i in node.inputs]
            origins = [where[i] for i in node.inputs]
        if transfers is not None:
            for t, origin in zip(args, origins):
                if origin != label:
                    transfers.add(t)
        try:
            handle = backend.compile(node.kind, node.attrs, [t.signature() for t in args])
            outs = backend.run(handle, args)
        except Exception as e:
            raise NodeError(node.id, f"{label}:{backend.name()}", e) from e
        values[node.id] = outs[0]
        where[node.id] = label
        if observer is not None:
            observer(node, args, outs)
    result = {}
    for oid in bundle.graph.output_ids:
        if transfers is not None and where[oid] != HOST:
            transfers.add(values[oid])
        result[oid] = values[oid]
    return result


def run_model(bundle: ModelBundle, backend, inputs: Mapping[int, Tensor], observer: Observer | None = None) -> dict[int, Tensor]:
    """Run every node on one backend."""
    return execute(bundle, inputs, lambda node: (HOST, backend), observer)
