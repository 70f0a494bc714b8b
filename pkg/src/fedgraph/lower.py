"""Lowering: rewrite federated primitives into local array ops.

broadcast_clients   -> tile_leading over the client count
sum_from_clients    -> reduce_leading(sum, keepdims) so the server axis stays
mean_from_clients   -> two sums and a division: the element sum divided by a
                       summed ones tensor (the count), which is exactly n in
                       f64, so the lowered mean is bit-identical to the eager
                       one
map_clients         -> the body graph spliced in as batched ops

The result is placement-erased: no communication primitives remain and
every abstract value carries placement None.
"""

from __future__ import annotations

import numpy as np

from .ir import AbstractValue, Graph, Var, is_comm
from .trace import GraphBuilder, splice


def _erased(aval: AbstractValue) -> AbstractValue:
    return aval.with_placement(None)


def lower(g: Graph) -> Graph:
    builder = GraphBuilder(g.client_count)
    env: dict[int, Var] = {}
    for v in g.inputs:
        env[v.id] = builder.add_input(_erased(v.aval))

    def ones_count(shape, dtype) -> Var:
        value = np.ones(shape, dtype=dtype)
        value.flags.writeable = False
        (c,) = builder.emit("constant", [], {"value": value})
        (total,) = builder.emit("reduce_leading", [c], {"op": "sum", "keepdims": True})
        return total

    for eq in g.equations:
        ins = [env[v.id] for v in eq.inputs]
        p = eq.primitive
        if p == "broadcast_clients":
            outs = builder.emit("tile_leading", ins, {"count": g.client_count})
        elif p == "sum_from_clients":
            outs = builder.emit("reduce_leading", ins, {"op": "sum", "keepdims": True})
        elif p == "mean_from_clients":
            (total,) = builder.emit(
                "reduce_leading", ins, {"op": "sum", "keepdims": True}
            )
            count = ones_count(ins[0].aval.shape, ins[0].aval.dtype)
            outs = builder.emit("div", [total, count])
        elif p == "map_clients":
            outs = tuple(splice(builder, lower(eq.params["body"]), ins))
        else:
            outs = builder.emit(p, ins, eq.params)
        for old, new in zip(eq.outputs, outs):
            env[old.id] = new

    lowered = builder.build([env[v.id] for v in g.outputs])
    assert not any(is_comm(eq.primitive) for eq in lowered.equations)
    return lowered
