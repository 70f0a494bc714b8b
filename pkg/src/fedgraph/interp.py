"""Reference interpreter for graphs.

Every rule delegates to the same tensor kernels the eager building blocks
use, so eval_graph agrees bit-for-bit with eager execution in f64.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from . import tensor as tc
from .errors import GraphError, PlacementError, ShapeError
from .ir import Equation, Graph
from .placement import Placement, PlacedTensor
from .tensor import Tensor


def eval_equation(eq: Equation, ins: Sequence[Tensor], client_count: int) -> tuple[Tensor, ...]:
    p = eq.primitive
    if p == "broadcast_clients":
        return (tc.tile_leading(ins[0], client_count),)
    if p == "sum_from_clients":
        return (tc.reduce_leading("sum", ins[0], keepdims=True),)
    if p == "mean_from_clients":
        return (tc.reduce_leading("mean", ins[0], keepdims=True),)
    if p == "map_clients":
        return _eval_map(eq, ins)
    if p in ("add", "sub", "mul", "div"):
        return (tc.ew_binary(p, ins[0], ins[1]),)
    if p == "neg":
        return (tc.neg(ins[0]),)
    if p == "integer_pow":
        return (tc.integer_pow(ins[0], eq.params["y"]),)
    if p == "scale":
        return (tc.scale(ins[0], eq.params["c"]),)
    if p == "batched_dot":
        return (tc.batched_dot(ins[0], ins[1]),)
    if p == "batched_outer":
        return (tc.batched_outer(ins[0], ins[1]),)
    if p == "reduce_leading":
        return (tc.reduce_leading(eq.params["op"], ins[0], eq.params.get("keepdims", False)),)
    if p == "tile_leading":
        return (tc.tile_leading(ins[0], eq.params["count"]),)
    if p == "constant":
        return (Tensor(eq.params["value"]),)
    raise GraphError(f"no evaluation rule for primitive {p!r}")


def _eval_map(eq: Equation, ins: Sequence[Tensor]) -> tuple[Tensor, ...]:
    body: Graph = eq.params["body"]
    extent = ins[0].shape[0]
    per_output: list[list[Tensor]] = [[] for _ in body.outputs]
    for i in range(extent):
        # keep the unit axis: body inputs are (1,)+slice_shape by construction
        slices = [Tensor(t.numpy()[i : i + 1]) for t in ins]
        outs = eval_graph(body, slices, check=False)
        for bucket, o in zip(per_output, outs):
            bucket.append(o if isinstance(o, Tensor) else o.tensor)
    return tuple(tc.concat_leading(bucket) for bucket in per_output)


def eval_equations(equations: Iterable[Equation], env: dict[int, Tensor], client_count: int) -> None:
    """Run equations against an id -> Tensor environment (in place)."""
    for eq in equations:
        outs = eval_equation(eq, [env[v.id] for v in eq.inputs], client_count)
        for v, t in zip(eq.outputs, outs):
            env[v.id] = t


def coerce_input(value, aval) -> Tensor:
    """Match a concrete input against an input spec; returns the bare tensor."""
    if isinstance(value, PlacedTensor):
        if aval.placement is None:
            raise PlacementError(f"graph input expects an unplaced value, got {value!r}")
        if value.placement is not aval.placement:
            raise PlacementError(
                f"placement mismatch: expected @{aval.placement.value}, "
                f"got @{value.placement.value}"
            )
        t = value.tensor
    else:
        t = tc.tensor(value, dtype=aval.dtype)
        if t.shape != aval.shape and aval.placement is Placement.SERVER and t.shape == aval.shape[1:]:
            t = Tensor(t.numpy()[None, ...])
    if t.dtype != aval.dtype:
        raise ShapeError(f"dtype mismatch: expected {aval.dtype}, got {t.dtype}")
    if t.shape != aval.shape:
        raise ShapeError(f"shape mismatch: expected {aval.shape}, got {t.shape}")
    return t


def eval_graph(g: Graph, inputs: Sequence, check: bool = True):
    """Evaluate a graph; outputs come back placed when their specs are placed."""
    if len(inputs) != len(g.inputs):
        raise ShapeError(f"graph takes {len(g.inputs)} inputs, got {len(inputs)}")
    env: dict[int, Tensor] = {}
    for var, value in zip(g.inputs, inputs):
        if not check and isinstance(value, Tensor):
            env[var.id] = value
        else:
            env[var.id] = coerce_input(value, var.aval)
    eval_equations(g.equations, env, g.client_count)
    outs = []
    for v in g.outputs:
        t = env[v.id]
        if v.aval.placement is not None:
            outs.append(PlacedTensor(t, v.aval.placement))
        else:
            outs.append(t)
    return outs
