"""Dataflow graph IR.

Programs are staged into SSA graphs whose equations draw from a closed
primitive set. Federated communication (broadcast_clients, sum_from_clients,
mean_from_clients) stays first-class; everything else is local array work.
Each primitive carries an abstract-evaluation rule used both to type graphs
during construction and to re-check them in validate_graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import GraphError, PlacementError, ShapeError
from .placement import Placement
from .tensor import dtype_name

Shape = tuple[int, ...]


@dataclass(frozen=True)
class AbstractValue:
    shape: Shape
    dtype: np.dtype
    placement: Placement | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(e) for e in self.shape))
        object.__setattr__(self, "dtype", np.dtype(self.dtype))
        if self.placement is not None and len(self.shape) == 0:
            raise PlacementError("placed abstract values need a leading axis")

    def with_placement(self, p: Placement | None) -> "AbstractValue":
        return AbstractValue(self.shape, self.dtype, p)

    def __repr__(self) -> str:
        tag = "" if self.placement is None else f"@{self.placement.value}"
        dims = ",".join(str(d) for d in self.shape)
        return f"{dtype_name(self.dtype)}[{dims}]{tag}"


@dataclass(frozen=True)
class Var:
    id: int
    aval: AbstractValue

    def __repr__(self) -> str:
        return f"v{self.id}:{self.aval!r}"


@dataclass(frozen=True)
class Equation:
    primitive: str
    inputs: tuple[Var, ...]
    outputs: tuple[Var, ...]
    params: dict[str, Any] = field(default_factory=dict)

    def __repr__(self) -> str:
        ins = " ".join(f"v{v.id}" for v in self.inputs)
        outs = ", ".join(f"v{v.id}" for v in self.outputs)
        return f"{outs} = {self.primitive} {ins}"


@dataclass(frozen=True)
class Graph:
    client_count: int
    inputs: tuple[Var, ...]
    equations: tuple[Equation, ...]
    outputs: tuple[Var, ...]


COMM_PRIMITIVES = ("broadcast_clients", "sum_from_clients", "mean_from_clients")


def _check_placed_extent(aval: AbstractValue, client_count: int, what: str) -> None:
    if aval.placement is Placement.SERVER and aval.shape[0] != 1:
        raise PlacementError(f"{what}: server value needs leading extent 1, got {aval!r}")
    if aval.placement is Placement.CLIENTS and aval.shape[0] != client_count:
        raise PlacementError(
            f"{what}: clients value needs leading extent {client_count}, got {aval!r}"
        )


def _combine_placements(op: str, avals: Sequence[AbstractValue]) -> Placement | None:
    out: Placement | None = None
    for a in avals:
        if a.placement is None:
            continue
        if out is None:
            out = a.placement
        elif a.placement is not out:
            raise PlacementError(
                f"{op}: mixed placements {out.value} and {a.placement.value}"
            )
    return out


def _same_dtype(op: str, avals: Sequence[AbstractValue]) -> np.dtype:
    dt = avals[0].dtype
    for a in avals[1:]:
        if a.dtype != dt:
            raise ShapeError(f"{op}: dtype mismatch {dt} vs {a.dtype}")
    return dt


# --- abstract evaluation rules ---------------------------------------------

def _ew_binary_rule(op):
    def rule(avals, params, client_count):
        a, b = avals
        _same_dtype(op, avals)
        if a.shape != b.shape and len(a.shape) != 0 and len(b.shape) != 0:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        shape = a.shape if len(a.shape) else b.shape
        return (AbstractValue(shape, a.dtype, _combine_placements(op, avals)),)

    return rule


def _ew_unary_rule(op):
    def rule(avals, params, client_count):
        (a,) = avals
        return (a,)

    return rule


def _broadcast_rule(avals, params, client_count):
    (a,) = avals
    if a.placement is Placement.CLIENTS:
        raise PlacementError("broadcast_clients: input is already clients-placed")
    if len(a.shape) == 0 or a.shape[0] != 1:
        raise PlacementError(
            f"broadcast_clients: input must be server-shaped (1, ...), got {a!r}"
        )
    return (AbstractValue((client_count,) + a.shape[1:], a.dtype, Placement.CLIENTS),)


def _agg_rule(op):
    def rule(avals, params, client_count):
        (a,) = avals
        if a.placement is not Placement.CLIENTS:
            raise PlacementError(f"{op}: input must be clients-placed, got {a!r}")
        return (AbstractValue((1,) + a.shape[1:], a.dtype, Placement.SERVER),)

    return rule


def _map_rule(avals, params, client_count):
    body = params.get("body")
    if not isinstance(body, Graph):
        raise GraphError("map_clients: params['body'] must be a Graph")
    if not avals:
        raise PlacementError("map_clients: zero-argument bodies are not supported")
    placement = avals[0].placement
    if placement is None:
        raise PlacementError("map_clients: operands must be placed")
    extent = avals[0].shape[0]
    for a in avals:
        if a.placement is not placement:
            raise PlacementError("map_clients: operands must share one placement")
        if len(a.shape) == 0 or a.shape[0] != extent:
            raise PlacementError("map_clients: operands must share the leading extent")
    if len(body.inputs) != len(avals):
        raise GraphError(
            f"map_clients: body arity {len(body.inputs)} != operand count {len(avals)}"
        )
    for bv, a in zip(body.inputs, avals):
        want = (1,) + a.shape[1:]
        if bv.aval.shape != want or bv.aval.dtype != a.dtype:
            raise ShapeError(
                f"map_clients: body input {bv.aval!r} does not match slice "
                f"{dtype_name(a.dtype)}{want}"
            )
    for eq in body.equations:
        if eq.primitive in COMM_PRIMITIVES or eq.primitive == "map_clients":
            raise GraphError(f"map_clients: body may not contain {eq.primitive}")
    outs = []
    for ov in body.outputs:
        if len(ov.aval.shape) == 0 or ov.aval.shape[0] != 1:
            raise ShapeError("map_clients: body outputs must keep the unit leading axis")
        outs.append(AbstractValue((extent,) + ov.aval.shape[1:], ov.aval.dtype, placement))
    return tuple(outs)


def _batched_dot_rule(avals, params, client_count):
    a, b = avals
    _same_dtype("batched_dot", avals)
    if len(a.shape) != 2 or a.shape != b.shape:
        raise ShapeError(f"batched_dot: need equal (n, d) operands, got {a!r} and {b!r}")
    return (AbstractValue(a.shape[:1], a.dtype, _combine_placements("batched_dot", avals)),)


def _batched_outer_rule(avals, params, client_count):
    m, b = avals
    _same_dtype("batched_outer", avals)
    if len(m.shape) != 1 or len(b.shape) != 2 or m.shape[0] != b.shape[0]:
        raise ShapeError(f"batched_outer: need (n,) and (n, d), got {m!r} and {b!r}")
    return (AbstractValue(b.shape, b.dtype, _combine_placements("batched_outer", avals)),)


def _reduce_rule(avals, params, client_count):
    (a,) = avals
    if a.placement is not None:
        raise PlacementError("reduce_leading applies to placement-erased values only")
    if len(a.shape) == 0:
        raise ShapeError("reduce_leading: rank-0 input")
    op = params.get("op")
    if op not in ("sum", "mean"):
        raise GraphError(f"reduce_leading: op must be sum or mean, got {op!r}")
    keep = params.get("keepdims", False)
    shape = ((1,) + a.shape[1:]) if keep else a.shape[1:]
    return (AbstractValue(shape, a.dtype, None),)


def _tile_rule(avals, params, client_count):
    (a,) = avals
    if a.placement is not None:
        raise PlacementError("tile_leading applies to placement-erased values only")
    if len(a.shape) == 0 or a.shape[0] != 1:
        raise ShapeError(f"tile_leading: need leading extent 1, got {a!r}")
    count = params.get("count")
    if not isinstance(count, int) or isinstance(count, bool) or count < 1:
        raise GraphError(f"tile_leading: count must be a positive int, got {count!r}")
    return (AbstractValue((count,) + a.shape[1:], a.dtype, None),)


def _constant_rule(avals, params, client_count):
    value = params.get("value")
    if not isinstance(value, np.ndarray):
        raise GraphError("constant: params['value'] must be an ndarray")
    if np.dtype(value.dtype) not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise GraphError(f"constant: unsupported dtype {value.dtype}")
    return (AbstractValue(value.shape, value.dtype, None),)


def _int_param(name):
    def check(params):
        v = params.get(name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise GraphError(f"param {name!r} must be a non-negative int, got {v!r}")

    return check


def _scale_param(params):
    c = params.get("c")
    if not isinstance(c, float) or not np.isfinite(c):
        raise GraphError(f"scale: param 'c' must be a finite float, got {c!r}")


@dataclass(frozen=True)
class PrimitiveDef:
    name: str
    arity: int | None  # None: variadic
    abstract_eval: Callable
    is_comm: bool = False
    param_keys: tuple[str, ...] = ()
    check_params: Callable[[dict], None] | None = None


PRIMITIVES: dict[str, PrimitiveDef] = {}


def _register(pd: PrimitiveDef) -> None:
    PRIMITIVES[pd.name] = pd


_register(PrimitiveDef("broadcast_clients", 1, _broadcast_rule, is_comm=True))
_register(PrimitiveDef("sum_from_clients", 1, _agg_rule("sum_from_clients"), is_comm=True))
_register(PrimitiveDef("mean_from_clients", 1, _agg_rule("mean_from_clients"), is_comm=True))
_register(PrimitiveDef("map_clients", None, _map_rule, param_keys=("body",)))
for _op in ("add", "sub", "mul", "div"):
    _register(PrimitiveDef(_op, 2, _ew_binary_rule(_op)))
_register(PrimitiveDef("neg", 1, _ew_unary_rule("neg")))
_register(
    PrimitiveDef(
        "integer_pow", 1, _ew_unary_rule("integer_pow"),
        param_keys=("y",), check_params=_int_param("y"),
    )
)
_register(
    PrimitiveDef(
        "scale", 1, _ew_unary_rule("scale"),
        param_keys=("c",), check_params=_scale_param,
    )
)
_register(PrimitiveDef("batched_dot", 2, _batched_dot_rule))
_register(PrimitiveDef("batched_outer", 2, _batched_outer_rule))
_register(
    PrimitiveDef(
        "reduce_leading", 1, _reduce_rule,
        param_keys=("op", "keepdims"),
    )
)
_register(
    PrimitiveDef(
        "tile_leading", 1, _tile_rule,
        param_keys=("count",),
    )
)
_register(PrimitiveDef("constant", 0, _constant_rule, param_keys=("value",)))


def primitive_def(name: str) -> PrimitiveDef:
    try:
        return PRIMITIVES[name]
    except KeyError:
        raise GraphError(f"unknown primitive {name!r}; the primitive set is closed") from None


def abstract_eval(
    primitive: str, avals: Sequence[AbstractValue], params: dict, client_count: int
) -> tuple[AbstractValue, ...]:
    pd = primitive_def(primitive)
    if pd.arity is not None and len(avals) != pd.arity:
        raise GraphError(f"{primitive}: expected {pd.arity} operands, got {len(avals)}")
    extra = set(params) - set(pd.param_keys)
    if extra:
        raise GraphError(f"{primitive}: unexpected params {sorted(extra)}")
    if pd.check_params is not None:
        pd.check_params(params)
    return pd.abstract_eval(avals, params, client_count)


def is_comm(primitive: str) -> bool:
    return primitive_def(primitive).is_comm


def validate_graph(g: Graph) -> None:
    """Re-check every structural invariant; raises GraphError and friends."""
    if g.client_count < 1:
        raise GraphError(f"client count must be positive, got {g.client_count}")
    defined: dict[int, AbstractValue] = {}
    for v in g.inputs:
        if v.id in defined:
            raise GraphError(f"input variable v{v.id} defined twice")
        _check_placed_extent(v.aval, g.client_count, "graph input")
        defined[v.id] = v.aval
    for eq in g.equations:
        for v in eq.inputs:
            if v.id not in defined:
                raise GraphError(f"{eq.primitive}: uses undefined variable v{v.id}")
            if defined[v.id] != v.aval:
                raise GraphError(f"{eq.primitive}: stale abstract value on v{v.id}")
        derived = abstract_eval(
            eq.primitive, [v.aval for v in eq.inputs], eq.params, g.client_count
        )
        if len(derived) != len(eq.outputs):
            raise GraphError(f"{eq.primitive}: output arity mismatch")
        for v, av in zip(eq.outputs, derived):
            if v.id in defined:
                raise GraphError(f"{eq.primitive}: variable v{v.id} defined twice (SSA)")
            if v.aval != av:
                raise GraphError(
                    f"{eq.primitive}: recorded output {v.aval!r} != derived {av!r}"
                )
            defined[v.id] = v.aval
        if eq.primitive == "map_clients":
            validate_graph(eq.params["body"])
    for v in g.outputs:
        if v.id not in defined:
            raise GraphError(f"graph output v{v.id} is undefined")


def _params_equal(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    for k in a:
        va, vb = a[k], b[k]
        if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
            if not (
                isinstance(va, np.ndarray)
                and isinstance(vb, np.ndarray)
                and va.dtype == vb.dtype
                and va.shape == vb.shape
                and np.array_equal(va, vb, equal_nan=True)
            ):
                return False
        elif isinstance(va, Graph) or isinstance(vb, Graph):
            if not (isinstance(va, Graph) and isinstance(vb, Graph) and graph_equal(va, vb)):
                return False
        elif isinstance(va, float) and isinstance(vb, float):
            if va != vb and not (np.isnan(va) and np.isnan(vb)):
                return False
        else:
            if type(va) is not type(vb) or va != vb:
                return False
    return True


def graph_equal(a: Graph, b: Graph) -> bool:
    """Structural equality up to variable renumbering."""
    if a.client_count != b.client_count:
        return False
    if len(a.inputs) != len(b.inputs) or len(a.equations) != len(b.equations):
        return False
    if len(a.outputs) != len(b.outputs):
        return False
    ren: dict[int, int] = {}
    for va, vb in zip(a.inputs, b.inputs):
        if va.aval != vb.aval:
            return False
        ren[va.id] = vb.id
    for ea, eb in zip(a.equations, b.equations):
        if ea.primitive != eb.primitive:
            return False
        if len(ea.inputs) != len(eb.inputs) or len(ea.outputs) != len(eb.outputs):
            return False
        for va, vb in zip(ea.inputs, eb.inputs):
            if ren.get(va.id) != vb.id:
                return False
        if not _params_equal(ea.params, eb.params):
            return False
        for va, vb in zip(ea.outputs, eb.outputs):
            if va.aval != vb.aval:
                return False
            ren[va.id] = vb.id
    return all(ren.get(va.id) == vb.id for va, vb in zip(a.outputs, b.outputs))
