"""Staging: run a program over symbolic values, recording equations.

Mapped-function bodies are traced over unit-leading slice values
((1,) + slice_shape), which keeps the slice-level vocabulary inside the
closed primitive set: the slice-level inner product is just batched_dot
with leading extent 1. Inlining a body into the enclosing graph is then a
splice that re-emits the same primitives while abstract evaluation widens
the leading extent to the client count.
"""

from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .errors import PlacementError, TraceError
from .ir import AbstractValue, Equation, Graph, Var, abstract_eval, validate_graph
from .placement import Placement, PlacedTensor, flatten_structure


class GraphBuilder:
    def __init__(self, client_count: int):
        if client_count < 1:
            raise TraceError(f"client count must be positive, got {client_count}")
        self.client_count = client_count
        self._next_id = 0
        self._inputs: list[Var] = []
        self._equations: list[Equation] = []

    def _fresh(self, aval: AbstractValue) -> Var:
        v = Var(self._next_id, aval)
        self._next_id += 1
        return v

    def add_input(self, aval: AbstractValue) -> Var:
        v = self._fresh(aval)
        self._inputs.append(v)
        return v

    def emit(self, primitive: str, inputs: Sequence[Var], params: dict | None = None) -> tuple[Var, ...]:
        params = dict(params or {})
        out_avals = abstract_eval(
            primitive, [v.aval for v in inputs], params, self.client_count
        )
        outs = tuple(self._fresh(a) for a in out_avals)
        self._equations.append(Equation(primitive, tuple(inputs), outs, params))
        return outs

    def build(self, outputs: Sequence[Var]) -> Graph:
        g = Graph(
            client_count=self.client_count,
            inputs=tuple(self._inputs),
            equations=tuple(self._equations),
            outputs=tuple(outputs),
        )
        validate_graph(g)
        return g


class TraceValue:
    """Symbolic value flowing through a program under trace."""

    __slots__ = ("builder", "var")

    def __init__(self, builder: GraphBuilder, var: Var):
        self.builder = builder
        self.var = var

    @property
    def shape(self) -> tuple[int, ...]:
        return self.var.aval.shape

    @property
    def dtype(self):
        return self.var.aval.dtype

    @property
    def placement(self) -> Placement | None:
        return self.var.aval.placement

    def __repr__(self) -> str:
        return f"TraceValue({self.var!r})"

    # arithmetic sugar; scalars become constant equations (graphs are closed terms)

    def _scalar_const(self, value: float) -> "TraceValue":
        arr = np.array(value, dtype=self.dtype)
        arr.flags.writeable = False
        (v,) = self.builder.emit("constant", [], {"value": arr})
        return TraceValue(self.builder, v)

    def _binary(self, op: str, other, reflect: bool) -> "TraceValue":
        if isinstance(other, TraceValue):
            if other.builder is not self.builder:
                raise TraceError(f"{op}: operands belong to different traces")
            rhs = other
        elif isinstance(other, numbers.Real) and not isinstance(other, bool):
            rhs = self._scalar_const(float(other))
        else:
            return NotImplemented
        a, b = (rhs, self) if reflect else (self, rhs)
        (v,) = self.builder.emit(op, [a.var, b.var])
        return TraceValue(self.builder, v)

    def __add__(self, other):
        return self._binary("add", other, reflect=False)

    def __radd__(self, other):
        return self._binary("add", other, reflect=True)

    def __sub__(self, other):
        return self._binary("sub", other, reflect=False)

    def __rsub__(self, other):
        return self._binary("sub", other, reflect=True)

    def __mul__(self, other):
        if isinstance(other, numbers.Real) and not isinstance(other, bool):
            (v,) = self.builder.emit("scale", [self.var], {"c": float(other)})
            return TraceValue(self.builder, v)
        return self._binary("mul", other, reflect=False)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self._binary("div", other, reflect=False)

    def __rtruediv__(self, other):
        return self._binary("div", other, reflect=True)

    def __pow__(self, k):
        if not isinstance(k, int) or isinstance(k, bool) or k < 0:
            raise TraceError(f"only non-negative integer powers are traceable, got {k!r}")
        (v,) = self.builder.emit("integer_pow", [self.var], {"y": k})
        return TraceValue(self.builder, v)

    def __neg__(self):
        (v,) = self.builder.emit("neg", [self.var])
        return TraceValue(self.builder, v)


def spec_of(x) -> AbstractValue:
    """Abstract value describing a concrete (placed) tensor."""
    if isinstance(x, PlacedTensor):
        return AbstractValue(x.tensor.shape, x.tensor.dtype, x.placement)
    if isinstance(x, tc.Tensor):
        return AbstractValue(x.shape, x.dtype, None)
    raise TraceError(f"cannot derive a spec from {type(x).__name__}")


def trace(program: Callable, input_specs, client_count: int) -> Graph:
    """Stage `program` into a Graph.

    input_specs is a structure (leaf = AbstractValue) matching the program's
    positional arguments; placed specs must already carry the leading
    placement axis ((1,)+s at the server, (n,)+s at clients).
    """
    builder = GraphBuilder(client_count)
    spec_leaves, rebuild = flatten_structure(input_specs)
    arg_leaves = []
    for spec in spec_leaves:
        if not isinstance(spec, AbstractValue):
            raise TraceError(f"input spec leaves must be AbstractValue, got {type(spec)!r}")
        if spec.placement is Placement.SERVER and spec.shape[0] != 1:
            raise TraceError(f"server input needs leading extent 1, got {spec!r}")
        if spec.placement is Placement.CLIENTS and spec.shape[0] != client_count:
            raise TraceError(
                f"clients input needs leading extent {client_count}, got {spec!r}"
            )
        arg_leaves.append(TraceValue(builder, builder.add_input(spec)))
    args = rebuild(arg_leaves)
    if not isinstance(args, (tuple, list)):
        args = (args,)
    result = program(*args)
    out_leaves, _ = flatten_structure(result)
    out_vars = []
    for leaf in out_leaves:
        if not isinstance(leaf, TraceValue) or leaf.builder is not builder:
            raise TraceError("program outputs must be values produced by this trace")
        out_vars.append(leaf.var)
    if not out_vars:
        raise TraceError("program produced no outputs")
    return builder.build(out_vars)


def splice(builder: GraphBuilder, body: Graph, operands: Sequence[Var]) -> list[Var]:
    """Re-emit `body`'s equations into `builder` with inputs bound to `operands`."""
    if len(operands) != len(body.inputs):
        raise TraceError(
            f"splice arity mismatch: {len(operands)} operands for {len(body.inputs)} inputs"
        )
    env: dict[int, Var] = {bv.id: ov for bv, ov in zip(body.inputs, operands)}
    for eq in body.equations:
        outs = builder.emit(eq.primitive, [env[v.id] for v in eq.inputs], eq.params)
        for bv, ov in zip(eq.outputs, outs):
            env[bv.id] = ov
    return [env[v.id] for v in body.outputs]


# --- traced forms of the federated building blocks -------------------------

def broadcast_traced(x: TraceValue) -> TraceValue:
    (v,) = x.builder.emit("broadcast_clients", [x.var])
    return TraceValue(x.builder, v)


def sum_traced(x: TraceValue) -> TraceValue:
    (v,) = x.builder.emit("sum_from_clients", [x.var])
    return TraceValue(x.builder, v)


def mean_traced(x: TraceValue) -> TraceValue:
    (v,) = x.builder.emit("mean_from_clients", [x.var])
    return TraceValue(x.builder, v)


def trace_map_body(fn: Callable, operand_avals: Sequence[AbstractValue]) -> Graph:
    """Trace fn over unit-leading slices of the operands."""
    slice_specs = tuple(
        AbstractValue((1,) + a.shape[1:], a.dtype, None) for a in operand_avals
    )
    try:
        return trace(fn, slice_specs, client_count=1)
    except PlacementError as e:
        raise TraceError(f"mapped function is not a per-client local computation: {e}") from e


def map_traced(fn: Callable, xs, inline: bool = True):
    """Traced federated_map: trace the body once, then inline or nest it."""
    leaves, rebuild_in = flatten_structure(xs)
    if not leaves:
        raise TraceError("federated_map needs at least one operand")
    if not all(isinstance(l, TraceValue) for l in leaves):
        raise TraceError("federated_map operands must all be traced values")
    builder = leaves[0].builder
    if any(l.builder is not builder for l in leaves):
        raise TraceError("federated_map operands belong to different traces")
    placements = {l.placement for l in leaves}
    if None in placements:
        raise PlacementError("federated_map operands must be placed")
    if len(placements) != 1:
        raise PlacementError("federated_map operands must share one placement")
    extents = {l.shape[0] for l in leaves}
    if len(extents) != 1:
        raise PlacementError("federated_map operands must share the leading extent")

    operand_vars = [l.var for l in leaves]
    body = trace_map_body(_as_positional(fn, rebuild_in, len(leaves)), [v.aval for v in operand_vars])
    if inline:
        out_vars = splice(builder, body, operand_vars)
    else:
        out_vars = list(builder.emit("map_clients", operand_vars, {"body": body}))
    outs = [TraceValue(builder, v) for v in out_vars]
    return outs[0] if len(outs) == 1 else tuple(outs)


def _as_positional(fn: Callable, rebuild_in, n_leaves: int) -> Callable:
    """Adapt fn to positional leaf arguments, restoring the operand structure."""

    def wrapper(*leaf_args):
        assert len(leaf_args) == n_leaves
        structured = rebuild_in(list(leaf_args))
        if isinstance(structured, (tuple, list)):
            return fn(*structured)
        return fn(structured)

    return wrapper


# --- leading-axis-polymorphic contraction helpers ---------------------------

def dot(a, b):
    """Inner product. Rank-1 tensors eagerly; traced values via batched_dot
    (mapped-function bodies see unit-leading slices, so this stays closed)."""
    if isinstance(a, TraceValue) and isinstance(b, TraceValue):
        if a.builder is not b.builder:
            raise TraceError("dot: operands belong to different traces")
        (v,) = a.builder.emit("batched_dot", [a.var, b.var])
        return TraceValue(a.builder, v)
    if isinstance(a, tc.Tensor) and isinstance(b, tc.Tensor):
        if a.ndim == 2:
            return tc.batched_dot(a, b)
        return tc.dot(a, b)
    raise TraceError("dot: operands must both be tensors or both be traced values")


def outer(m, b):
    """Row scaling: m[i] * b[i, :]. Eager slices use the rank-0 broadcast of
    mul; traced values emit batched_outer."""
    if isinstance(m, TraceValue) and isinstance(b, TraceValue):
        if m.builder is not b.builder:
            raise TraceError("outer: operands belong to different traces")
        (v,) = m.builder.emit("batched_outer", [m.var, b.var])
        return TraceValue(m.builder, v)
    if isinstance(m, tc.Tensor) and isinstance(b, tc.Tensor):
        if m.ndim == 1 and b.ndim == 2:
            return tc.batched_outer(m, b)
        return tc.mul(m, b)
    raise TraceError("outer: operands must both be tensors or both be traced values")
