"""Placements: federated values as tensors with a cardinality-shaped leading axis.

A server-placed value has leading extent 1; a clients-placed value has
leading extent n, the client count bound for the enclosing computation.
Structures (nested tuples / string-keyed dicts) must be uniformly placed.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .errors import PlacementError, ShapeError
from .tensor import Tensor, stack, tensor


class Placement(enum.Enum):
    SERVER = "server"
    CLIENTS = "clients"

    def __repr__(self) -> str:
        return f"Placement.{self.name}"


_ambient_clients: contextvars.ContextVar[int | None] = contextvars.ContextVar(
    "fedgraph_client_count", default=None
)


@contextlib.contextmanager
def client_count(n: int) -> Iterator[int]:
    """Bind the number of clients for eager federated execution."""
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise PlacementError(f"client count must be a positive int, got {n!r}")
    token = _ambient_clients.set(n)
    try:
        yield n
    finally:
        _ambient_clients.reset(token)


def ambient_client_count() -> int | None:
    """The bound client count, or None outside any client_count() block."""
    return _ambient_clients.get()


def current_client_count() -> int:
    n = _ambient_clients.get()
    if n is None:
        raise PlacementError(
            "no client count bound; wrap eager federated calls in client_count(n)"
        )
    return n


@dataclass(frozen=True)
class PlacedTensor:
    """A tensor paired with its placement; tensor[i, ...] is holder i's value."""

    tensor: Tensor
    placement: Placement

    def __post_init__(self):
        if self.tensor.ndim == 0:
            raise PlacementError("placed tensors need a leading placement axis")
        if self.placement is Placement.SERVER and self.tensor.shape[0] != 1:
            raise PlacementError(
                f"server placement needs leading extent 1, got shape {self.tensor.shape}"
            )
        if self.placement is Placement.CLIENTS and self.tensor.shape[0] < 1:
            raise PlacementError("clients placement needs leading extent >= 1")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def dtype(self):
        return self.tensor.dtype

    def item(self) -> float:
        return self.tensor.item()

    def __repr__(self) -> str:
        return f"PlacedTensor({self.tensor!r}, @{self.placement.value})"


def place_server(t) -> PlacedTensor:
    """Wrap a tensor with a prepended server axis of extent 1."""
    t = tensor(t)
    arr = t.numpy()[None, ...]
    return PlacedTensor(Tensor(arr), Placement.SERVER)


def place_clients(per_client: Sequence, n: int | None = None) -> PlacedTensor:
    """Stack one tensor per client along a new leading axis.

    The list length must match the declared client count (the explicit n
    argument, or the ambient client_count context).
    """
    if n is None:
        n = current_client_count()
    items = [tensor(t) for t in per_client]
    if len(items) != n:
        raise PlacementError(f"expected {n} per-client tensors, got {len(items)}")
    try:
        return PlacedTensor(stack(items), Placement.CLIENTS)
    except ShapeError as e:
        raise PlacementError(f"heterogeneous per-client tensors: {e}") from e


def clients_from_stacked(t, n: int | None = None) -> PlacedTensor:
    """Treat an existing (n,)+s tensor as clients-placed."""
    t = tensor(t)
    if n is None:
        n = current_client_count()
    if t.ndim == 0 or t.shape[0] != n:
        raise PlacementError(f"expected leading extent {n}, got shape {t.shape}")
    return PlacedTensor(t, Placement.CLIENTS)


def client_slice(x: PlacedTensor, i: int) -> Tensor:
    """Client i's value, leading axis dropped."""
    if x.placement is not Placement.CLIENTS:
        raise PlacementError("client_slice needs a clients-placed value")
    n = x.tensor.shape[0]
    if not 0 <= i < n:
        raise PlacementError(f"client index {i} out of range for {n} clients")
    # asarray: indexing a rank-1 tensor yields a numpy scalar
    return Tensor(np.asarray(x.tensor.numpy()[i]))


def unplace(x: PlacedTensor) -> Tensor:
    """Strip placement. Server values lose the unit axis; clients values
    come back as the stacked (n,)+s tensor."""
    if x.placement is Placement.SERVER:
        return Tensor(x.tensor.numpy()[0])
    return x.tensor


# ---------------------------------------------------------------------------
# structures: finite trees of tuples/lists and string-keyed dicts.
# Leaf order is canonical: depth-first, dict keys sorted.

Structure = Any


def flatten_structure(obj: Structure) -> tuple[list[Any], Callable[[list[Any]], Structure]]:
    """Flatten to (leaves, rebuild); rebuild(leaves2) restores the shape."""
    leaves: list[Any] = []
    spec = _flatten_into(obj, leaves)

    def rebuild(new_leaves: list[Any]) -> Structure:
        if len(new_leaves) != len(leaves):
            raise ShapeError(
                f"structure rebuild needs {len(leaves)} leaves, got {len(new_leaves)}"
            )
        it = iter(new_leaves)
        return _rebuild(spec, it)

    return leaves, rebuild


def _flatten_into(obj, out: list):
    if isinstance(obj, tuple):
        return ("tuple", [_flatten_into(v, out) for v in obj])
    if isinstance(obj, list):
        return ("list", [_flatten_into(v, out) for v in obj])
    if isinstance(obj, dict):
        keys = sorted(obj)
        if any(not isinstance(k, str) for k in obj):
            raise ShapeError("structure dict keys must be strings")
        return ("dict", [(k, _flatten_into(obj[k], out)) for k in keys])
    out.append(obj)
    return ("leaf", None)


def _rebuild(spec, it):
    kind, children = spec
    if kind == "leaf":
        return next(it)
    if kind == "tuple":
        return tuple(_rebuild(c, it) for c in children)
    if kind == "list":
        return [_rebuild(c, it) for c in children]
    return {k: _rebuild(c, it) for k, c in children}


def structure_paths(obj: Structure) -> list[str]:
    """Leaf paths in canonical order, for error messages."""
    paths: list[str] = []
    _paths_into(obj, "", paths)
    return paths


def _paths_into(obj, prefix, out):
    if isinstance(obj, (tuple, list)):
        for i, v in enumerate(obj):
            _paths_into(v, f"{prefix}[{i}]", out)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            _paths_into(obj[k], f"{prefix}.{k}", out)
    else:
        out.append(prefix or "<root>")


def validate_structure(s: Structure) -> Placement | None:
    """Check uniform placement and leading extent; returns the shared placement.

    Empty structures are vacuously valid (returns None). Offending leaves are
    reported by path.
    """
    leaves, _ = flatten_structure(s)
    paths = structure_paths(s)
    placement: Placement | None = None
    extent: int | None = None
    first_path = None
    for leaf, path in zip(leaves, paths):
        if not isinstance(leaf, PlacedTensor):
            raise PlacementError(f"leaf {path} is not a placed tensor")
        if placement is None:
            placement, extent, first_path = leaf.placement, leaf.shape[0], path
            continue
        if leaf.placement is not placement:
            raise PlacementError(
                f"mixed placements: {first_path} is @{placement.value}, "
                f"{path} is @{leaf.placement.value}"
            )
        if leaf.shape[0] != extent:
            raise PlacementError(
                f"leading extent mismatch: {first_path} has {extent}, "
                f"{path} has {leaf.shape[0]}"
            )
    return placement
