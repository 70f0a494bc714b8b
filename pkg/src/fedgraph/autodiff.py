"""Federated automatic differentiation as graph-to-graph transforms.

Forward mode (jvp) pairs every primal equation with its tangent equation.
Reverse mode (grad) is linearize-then-transpose: the forward pass records a
linear tape of tangent operations (each linear in its tangent operands,
with primal values as captured constants), and the tape is then walked
backwards, emitting one transpose per entry. The federated transposes are
the point of the exercise: broadcast and sum are duals, and the mean pulls
back to a broadcast followed by division by the client count.

Everything either transform emits stays inside the closed primitive set;
check_closure verifies that, including nested map bodies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence, Union

import numpy as np

from .errors import AutodiffError
from .ir import AbstractValue, Graph, Var, primitive_def
from .placement import Placement
from .trace import GraphBuilder, splice


class _ZeroType:
    """Symbolic zero tangent."""

    def __repr__(self):
        return "Zero"


ZERO = _ZeroType()


@dataclass(frozen=True)
class Slot:
    """Reference to a tape value (a tangent)."""

    index: int


@dataclass(frozen=True)
class Const:
    """Reference to a primal-side variable captured by a linear op."""

    var: Var


TapeIn = Union[Slot, Const]


@dataclass
class _Entry:
    prim: str
    ins: tuple[TapeIn, ...]
    in_avals: tuple[AbstractValue, ...]
    params: dict
    out_slot: int
    out_aval: AbstractValue


class _TangentCtx:
    """Common interface for the two linearization consumers.

    jvp materializes tangent equations immediately; grad records tape
    entries to transpose later.
    """

    def lin(self, prim: str, ins: Sequence, params: dict | None = None):
        raise NotImplementedError


class _JvpCtx(_TangentCtx):
    def __init__(self, builder: GraphBuilder):
        self.builder = builder

    def lin(self, prim, ins, params=None):
        vars_in = [i.var if isinstance(i, Const) else i for i in ins]
        (out,) = self.builder.emit(prim, vars_in, params or {})
        return out


class _TapeCtx(_TangentCtx):
    def __init__(self, builder: GraphBuilder):
        self.builder = builder  # for primal residuals only
        self.entries: list[_Entry] = []
        self.slot_avals: list[AbstractValue] = []

    def new_slot(self, aval: AbstractValue) -> Slot:
        self.slot_avals.append(aval)
        return Slot(len(self.slot_avals) - 1)

    def lin(self, prim, ins, params=None):
        params = dict(params or {})
        norm: list[TapeIn] = []
        avals: list[AbstractValue] = []
        for i in ins:
            if isinstance(i, Const):
                norm.append(i)
                avals.append(i.var.aval)
            elif isinstance(i, Slot):
                norm.append(i)
                avals.append(self.slot_avals[i.index])
            else:
                raise AutodiffError(f"bad tape operand {i!r}")
        from .ir import abstract_eval

        (out_aval,) = abstract_eval(
            prim, avals, params, self.builder.client_count
        )
        slot = self.new_slot(out_aval)
        self.entries.append(_Entry(prim, tuple(norm), tuple(avals), params, slot.index, out_aval))
        return slot


def _is_zero(t) -> bool:
    return t is ZERO


def _jvp_for_equation(eq, new_ins: list[Var], tans: list, ctx: _TangentCtx, builder: GraphBuilder):
    """Tangents of one equation. Returns one tangent (or ZERO) per output."""
    p = eq.primitive
    params = eq.params
    if p == "constant":
        return [ZERO]
    if p in ("broadcast_clients", "sum_from_clients", "mean_from_clients", "neg",
             "tile_leading", "reduce_leading"):
        (t,) = tans
        return [ZERO] if _is_zero(t) else [ctx.lin(p, [t], params)]
    if p == "scale":
        (t,) = tans
        return [ZERO] if _is_zero(t) else [ctx.lin("scale", [t], params)]
    if p == "add":
        ta, tb = tans
        if _is_zero(ta) and _is_zero(tb):
            return [ZERO]
        if _is_zero(ta):
            return [tb]
        if _is_zero(tb):
            return [ta]
        return [ctx.lin("add", [ta, tb])]
    if p == "sub":
        ta, tb = tans
        if _is_zero(ta) and _is_zero(tb):
            return [ZERO]
        if _is_zero(tb):
            return [ta]
        if _is_zero(ta):
            return [ctx.lin("neg", [tb])]
        return [ctx.lin("sub", [ta, tb])]
    if p == "mul":
        ta, tb = tans
        xa, xb = new_ins
        terms = []
        if not _is_zero(ta):
            terms.append(ctx.lin("mul", [ta, Const(xb)]))
        if not _is_zero(tb):
            terms.append(ctx.lin("mul", [Const(xa), tb]))
        if not terms:
            return [ZERO]
        return [terms[0] if len(terms) == 1 else ctx.lin("add", terms)]
    if p == "div":
        ta, tb = tans
        xa, xb = new_ins
        terms = []
        if not _is_zero(ta):
            terms.append(ctx.lin("div", [ta, Const(xb)]))
        if not _is_zero(tb):
            # d(x/y) wrt y: -(x/y^2) dy, built from primal residuals
            (q,) = builder.emit("div", [xa, xb])
            (q2,) = builder.emit("div", [q, xb])
            (nq2,) = builder.emit("neg", [q2])
            terms.append(ctx.lin("mul", [Const(nq2), tb]))
        if not terms:
            return [ZERO]
        return [terms[0] if len(terms) == 1 else ctx.lin("add", terms)]
    if p == "integer_pow":
        (t,) = tans
        y = params["y"]
        if _is_zero(t) or y == 0:
            return [ZERO]
        (x,) = new_ins
        (xk,) = builder.emit("integer_pow", [x], {"y": y - 1})
        (r,) = builder.emit("scale", [xk], {"c": float(y)})
        return [ctx.lin("mul", [Const(r), t])]
    if p == "batched_dot":
        ta, tb = tans
        xa, xb = new_ins
        terms = []
        if not _is_zero(ta):
            terms.append(ctx.lin("batched_dot", [ta, Const(xb)]))
        if not _is_zero(tb):
            terms.append(ctx.lin("batched_dot", [Const(xa), tb]))
        if not terms:
            return [ZERO]
        return [terms[0] if len(terms) == 1 else ctx.lin("add", terms)]
    if p == "batched_outer":
        tm, tb = tans
        xm, xb = new_ins
        terms = []
        if not _is_zero(tm):
            terms.append(ctx.lin("batched_outer", [tm, Const(xb)]))
        if not _is_zero(tb):
            terms.append(ctx.lin("batched_outer", [Const(xm), tb]))
        if not terms:
            return [ZERO]
        return [terms[0] if len(terms) == 1 else ctx.lin("add", terms)]
    raise AutodiffError(f"no differentiation rule for primitive {p!r}")


def _materialize_zero(builder: GraphBuilder, like: Var) -> Var:
    # zero with the shape/dtype/placement of an existing var
    (z,) = builder.emit("scale", [like], {"c": 0.0})
    return z


def jvp(g: Graph) -> Graph:
    """Forward-mode transform: (primals, tangents) -> (outputs, output tangents).

    Every input gets a tangent of the same abstract value. map_clients
    equations become a single map over (primals, tangents) whose body is the
    jvp of the original body.
    """
    builder = GraphBuilder(g.client_count)
    primal_env: dict[int, Var] = {}
    tan_env: dict[int, Any] = {}
    for v in g.inputs:
        primal_env[v.id] = builder.add_input(v.aval)
    for v in g.inputs:
        tan_env[v.id] = builder.add_input(v.aval)
    ctx = _JvpCtx(builder)
    for eq in g.equations:
        new_ins = [primal_env[v.id] for v in eq.inputs]
        tans = [tan_env[v.id] for v in eq.inputs]
        if eq.primitive == "map_clients":
            body_jvp = jvp(eq.params["body"])
            tan_ins = [
                _materialize_zero(builder, x) if _is_zero(t) else t
                for x, t in zip(new_ins, tans)
            ]
            outs = builder.emit("map_clients", new_ins + tan_ins, {"body": body_jvp})
            k = len(eq.outputs)
            for old, new in zip(eq.outputs, outs[:k]):
                primal_env[old.id] = new
            for old, new in zip(eq.outputs, outs[k:]):
                tan_env[old.id] = new
            continue
        outs = builder.emit(eq.primitive, new_ins, eq.params)
        for old, new in zip(eq.outputs, outs):
            primal_env[old.id] = new
        out_tans = _jvp_for_equation(eq, new_ins, tans, ctx, builder)
        for old, t in zip(eq.outputs, out_tans):
            tan_env[old.id] = t
    out_vars = [primal_env[v.id] for v in g.outputs]
    for v in g.outputs:
        t = tan_env[v.id]
        if _is_zero(t):
            t = _materialize_zero(builder, primal_env[v.id])
        out_vars.append(t)
    return builder.build(out_vars)


def inline_maps(g: Graph) -> Graph:
    """Replace every map_clients equation by its spliced body."""
    builder = GraphBuilder(g.client_count)
    env: dict[int, Var] = {}
    for v in g.inputs:
        env[v.id] = builder.add_input(v.aval)
    for eq in g.equations:
        ins = [env[v.id] for v in eq.inputs]
        if eq.primitive == "map_clients":
            outs = splice(builder, eq.params["body"], ins)
        else:
            outs = builder.emit(eq.primitive, ins, eq.params)
        for old, new in zip(eq.outputs, outs):
            env[old.id] = new
    return builder.build([env[v.id] for v in g.outputs])


def _transpose_entry(builder: GraphBuilder, entry: _Entry, ct: Var, client_count: int):
    """Cotangent contributions (slot, var) for one tape entry."""
    p = entry.prim
    ins = entry.ins
    out = []

    def emit(prim, vars_in, params=None):
        (v,) = builder.emit(prim, vars_in, params or {})
        return v

    if p == "add":
        for i in ins:
            out.append((i.index, ct))
    elif p == "sub":
        a, b = ins
        if isinstance(a, Slot):
            out.append((a.index, ct))
        if isinstance(b, Slot):
            out.append((b.index, emit("neg", [ct])))
    elif p == "neg":
        out.append((ins[0].index, emit("neg", [ct])))
    elif p == "scale":
        out.append((ins[0].index, emit("scale", [ct], entry.params)))
    elif p == "mul":
        a, b = ins
        if isinstance(a, Slot) and isinstance(b, Const):
            out.append((a.index, emit("mul", [ct, b.var])))
        elif isinstance(b, Slot) and isinstance(a, Const):
            out.append((b.index, emit("mul", [ct, a.var])))
        else:
            raise AutodiffError("tape mul must have exactly one tangent operand")
    elif p == "div":
        a, b = ins
        if not (isinstance(a, Slot) and isinstance(b, Const)):
            raise AutodiffError("tape div must be linear in the numerator")
        out.append((a.index, emit("div", [ct, b.var])))
    elif p == "batched_dot":
        a, b = ins
        if isinstance(a, Slot) and isinstance(b, Const):
            out.append((a.index, emit("batched_outer", [ct, b.var])))
        elif isinstance(b, Slot) and isinstance(a, Const):
            out.append((b.index, emit("batched_outer", [ct, a.var])))
        else:
            raise AutodiffError("tape batched_dot must have exactly one tangent operand")
    elif p == "batched_outer":
        m, b = ins
        if isinstance(m, Slot) and isinstance(b, Const):
            out.append((m.index, emit("batched_dot", [ct, b.var])))
        elif isinstance(b, Slot) and isinstance(m, Const):
            out.append((b.index, emit("batched_outer", [m.var, ct])))
        else:
            raise AutodiffError("tape batched_outer must have exactly one tangent operand")
    elif p == "broadcast_clients":
        out.append((ins[0].index, emit("sum_from_clients", [ct])))
    elif p == "sum_from_clients":
        out.append((ins[0].index, emit("broadcast_clients", [ct])))
    elif p == "mean_from_clients":
        bcast = emit("broadcast_clients", [ct])
        n = np.array(float(client_count), dtype=entry.out_aval.dtype)
        n.flags.writeable = False
        nconst = emit("constant", [], {"value": n})
        out.append((ins[0].index, emit("div", [bcast, nconst])))
    elif p == "tile_leading":
        out.append((ins[0].index, emit("reduce_leading", [ct], {"op": "sum", "keepdims": True})))
    elif p == "reduce_leading":
        if not entry.params.get("keepdims", False):
            raise AutodiffError("transpose of reduce_leading without keepdims is unsupported")
        extent = entry.in_avals[0].shape[0]
        tiled = emit("tile_leading", [ct], {"count": extent})
        if entry.params["op"] == "sum":
            out.append((ins[0].index, tiled))
        else:
            n = np.array(float(extent), dtype=entry.out_aval.dtype)
            n.flags.writeable = False
            nconst = emit("constant", [], {"value": n})
            out.append((ins[0].index, emit("div", [tiled, nconst])))
    else:
        raise AutodiffError(f"no transpose rule for primitive {entry.prim!r}")
    return out


def grad(g: Graph, wrt: int = 0) -> Graph:
    """Reverse-mode transform for a single scalar server-placed output.

    Returns a graph with the same inputs whose sole output is d(out)/d(input
    wrt), server-placed. Primal equations are kept even when the gradient
    does not need them (no dead-code elimination here; see dce()).
    """
    if len(g.outputs) != 1:
        raise AutodiffError(f"grad needs a single output, got {len(g.outputs)}")
    out_aval = g.outputs[0].aval
    if out_aval.placement is not Placement.SERVER or out_aval.shape != (1,):
        raise AutodiffError(
            f"grad needs a scalar server-placed output, got {out_aval!r}"
        )
    if not 0 <= wrt < len(g.inputs):
        raise AutodiffError(f"wrt index {wrt} out of range for {len(g.inputs)} inputs")
    wrt_aval = g.inputs[wrt].aval
    if wrt_aval.placement is not Placement.SERVER:
        raise AutodiffError(
            "grad is defined for server-placed inputs only; differentiation "
            f"w.r.t. a @{wrt_aval.placement.value if wrt_aval.placement else 'unplaced'} "
            "input is rejected"
        )

    # transposing a nested body would need a second transform pass; splice
    # maps away first (jvp keeps them nested instead)
    g = inline_maps(g)

    builder = GraphBuilder(g.client_count)
    primal_env: dict[int, Var] = {}
    for v in g.inputs:
        primal_env[v.id] = builder.add_input(v.aval)
    ctx = _TapeCtx(builder)
    tan_env: dict[int, Any] = {}
    for i, v in enumerate(g.inputs):
        tan_env[v.id] = ctx.new_slot(v.aval) if i == wrt else ZERO

    for eq in g.equations:
        new_ins = [primal_env[v.id] for v in eq.inputs]
        outs = builder.emit(eq.primitive, new_ins, eq.params)
        for old, new in zip(eq.outputs, outs):
            primal_env[old.id] = new
        tans = [tan_env[v.id] for v in eq.inputs]
        out_tans = _jvp_for_equation(eq, new_ins, tans, ctx, builder)
        for old, t in zip(eq.outputs, out_tans):
            tan_env[old.id] = t

    out_tan = tan_env[g.outputs[0].id]
    wrt_var = primal_env[g.inputs[wrt].id]
    if _is_zero(out_tan):
        return builder.build([_materialize_zero(builder, wrt_var)])

    # reverse sweep over the tape
    seed = np.ones((1,), dtype=out_aval.dtype)
    seed.flags.writeable = False
    (seed_var,) = builder.emit("constant", [], {"value": seed})
    contributions: dict[int, list[Var]] = {out_tan.index: [seed_var]}

    def folded(slot: int) -> Var | None:
        vars_ = contributions.get(slot)
        if not vars_:
            return None
        acc = vars_[0]
        for v in vars_[1:]:
            (acc,) = builder.emit("add", [acc, v])
        return acc

    for entry in reversed(ctx.entries):
        ct = folded(entry.out_slot)
        if ct is None:
            continue
        for slot, var in _transpose_entry(builder, entry, ct, g.client_count):
            contributions.setdefault(slot, []).append(var)

    grad_var = folded(0)
    if grad_var is None:
        grad_var = _materialize_zero(builder, wrt_var)
    if grad_var.aval.placement is None:
        # e.g. the identity program: the cotangent never crossed a placed op
        zero = _materialize_zero(builder, wrt_var)
        (grad_var,) = builder.emit("add", [zero, grad_var])
    return builder.build([grad_var])


def check_closure(g: Graph) -> bool:
    """Verify every equation (and nested body) uses only closed-set primitives."""
    for eq in g.equations:
        primitive_def(eq.primitive)
        if eq.primitive == "map_clients":
            check_closure(eq.params["body"])
    return True


def dce(g: Graph, remove_comm: bool = False) -> Graph:
    """Drop equations whose outputs are unused.

    Off the main paths by design: grad keeps unused primal equations so the
    transformed graph shows the full primal structure. Communication
    equations are preserved unless remove_comm is set.
    """
    from .ir import is_comm

    live = {v.id for v in g.outputs}
    keep: list = []
    for eq in reversed(g.equations):
        used = any(v.id in live for v in eq.outputs)
        if used or (is_comm(eq.primitive) and not remove_comm):
            keep.append(eq)
            for v in eq.inputs:
                live.add(v.id)
    keep.reverse()
    return Graph(g.client_count, g.inputs, tuple(keep), g.outputs)
