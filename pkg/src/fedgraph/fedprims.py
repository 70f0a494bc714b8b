"""The four federated building blocks.

Eager semantics are the ground truth the interpreter and runtime are tested
against: broadcast tiles over the leading axis, map applies a pure function
per client slice, sum/mean aggregate over the leading axis in pairwise-tree
order. When operands are traced values the calls record equations instead.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tc
from . import trace as tr
from .errors import PlacementError, TraceError
from .placement import (
    Placement,
    PlacedTensor,
    client_slice,
    current_client_count,
    flatten_structure,
    validate_structure,
)


def _any_traced(leaves) -> bool:
    return any(isinstance(l, tr.TraceValue) for l in leaves)


def federated_broadcast(x):
    """server -> clients: every client receives the server value."""
    if isinstance(x, tr.TraceValue):
        return tr.broadcast_traced(x)
    if not isinstance(x, PlacedTensor):
        raise PlacementError("federated_broadcast needs a placed tensor")
    if x.placement is not Placement.SERVER:
        raise PlacementError("federated_broadcast: input is already clients-placed")
    n = current_client_count()
    return PlacedTensor(tc.tile_leading(x.tensor, n), Placement.CLIENTS)


def federated_sum(x):
    """clients -> server: pairwise-tree sum over clients."""
    if isinstance(x, tr.TraceValue):
        return tr.sum_traced(x)
    if not isinstance(x, PlacedTensor) or x.placement is not Placement.CLIENTS:
        raise PlacementError("federated_sum needs a clients-placed tensor")
    _check_extent(x)
    return PlacedTensor(tc.reduce_leading("sum", x.tensor, keepdims=True), Placement.SERVER)


def federated_mean(x):
    """clients -> server: unweighted mean, the tree sum divided by n."""
    if isinstance(x, tr.TraceValue):
        return tr.mean_traced(x)
    if not isinstance(x, PlacedTensor) or x.placement is not Placement.CLIENTS:
        raise PlacementError("federated_mean needs a clients-placed tensor")
    _check_extent(x)
    return PlacedTensor(tc.reduce_leading("mean", x.tensor, keepdims=True), Placement.SERVER)


def federated_map(fn: Callable, xs, inline: bool = True):
    """Apply a pure function to every client's slice (placement-preserving).

    xs is one placed tensor or a structure of uniformly placed tensors; fn
    receives one unplaced slice per leaf and must use only local tensor ops.
    Under tracing the body is staged once and inlined (or kept as a nested
    map_clients equation when inline=False).
    """
    leaves, rebuild = flatten_structure(xs)
    if not leaves:
        raise PlacementError("federated_map needs at least one operand")
    if _any_traced(leaves):
        return tr.map_traced(fn, xs, inline=inline)
    placement = validate_structure(xs)
    extent = leaves[0].shape[0]
    if placement is Placement.CLIENTS:
        _check_extent(leaves[0])

    def slices(i):
        if placement is Placement.CLIENTS:
            return [client_slice(l, i) for l in leaves]
        return [tc.Tensor(np.asarray(l.tensor.numpy()[i])) for l in leaves]

    per_client = []
    for i in range(extent):
        structured = rebuild(slices(i))
        if isinstance(structured, (tuple, list)):
            out = fn(*structured)
        else:
            out = fn(structured)
        out_leaves, rebuild_out = flatten_structure(out)
        if not out_leaves:
            raise TraceError("mapped function returned no tensors")
        for leaf in out_leaves:
            if not isinstance(leaf, tc.Tensor):
                raise TraceError(
                    f"mapped function must return tensors, got {type(leaf).__name__}"
                )
        per_client.append(out_leaves)

    stacked = [
        PlacedTensor(tc.stack([row[k] for row in per_client]), placement)
        for k in range(len(per_client[0]))
    ]
    result = rebuild_out(stacked)
    return result


def _check_extent(x: PlacedTensor) -> None:
    n = current_client_count()
    if x.tensor.shape[0] != n:
        raise PlacementError(
            f"clients value has leading extent {x.tensor.shape[0]}, "
            f"but {n} clients are bound"
        )
