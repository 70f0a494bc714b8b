"""Sharded execution of graphs over the clients axis.

partition() turns a graph (pre-lowering, communication primitives intact)
into a phase list: server-side compute, broadcasts (server -> workers),
sharded worker compute over contiguous client blocks, and reduces
(workers -> server). Per-worker partial sums reuse the pairwise tree over
each block and the cross-worker combine runs the same tree over the worker
partials in worker order, so power-of-two client/worker counts reproduce
the single-machine result bit for bit.

Three executors share the phase machinery:
  loop     in-process, one client at a time (the for-loop baseline whose
           round time grows linearly with the cohort)
  thread   in-process pool; communication steps are explicit buffer
           exchanges at phase barriers (the correctness reference)
  process  pinned worker processes over pipes, client data bound once;
           the only executor that actually runs numpy concurrently, used
           for scaling measurements
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import tensor as tc
from .errors import ExecutionError, PlanError
from .interp import coerce_input, eval_equations, eval_graph
from .ir import AbstractValue, Equation, Graph, is_comm
from .placement import Placement, PlacedTensor
from .tensor import Tensor

BACKENDS = ("loop", "thread", "process")


@dataclass(frozen=True)
class ShardingSpec:
    """Contiguous, non-empty client blocks, one per worker."""

    worker_count: int
    blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.worker_count < 1 or len(self.blocks) != self.worker_count:
            raise PlanError(
                f"need one block per worker, got {len(self.blocks)} blocks "
                f"for {self.worker_count} workers"
            )
        cursor = 0
        for start, stop in self.blocks:
            if start != cursor or stop <= start:
                raise PlanError(
                    f"blocks must be contiguous and non-empty, got {self.blocks}"
                )
            cursor = stop

    @property
    def n_clients(self) -> int:
        return self.blocks[-1][1]

    @staticmethod
    def balanced(n_clients: int, worker_count: int) -> "ShardingSpec":
        if worker_count < 1:
            raise PlanError(f"worker count must be positive, got {worker_count}")
        if worker_count > n_clients:
            raise PlanError(
                f"{worker_count} workers for {n_clients} clients would leave "
                "empty blocks"
            )
        base, extra = divmod(n_clients, worker_count)
        blocks = []
        start = 0
        for w in range(worker_count):
            size = base + (1 if w < extra else 0)
            blocks.append((start, start + size))
            start += size
        return ShardingSpec(worker_count, tuple(blocks))


@dataclass(frozen=True)
class ServerBlock:
    equations: tuple[Equation, ...]


@dataclass(frozen=True)
class BroadcastStep:
    equation: Equation


@dataclass(frozen=True)
class WorkerBlock:
    equations: tuple[Equation, ...]
    captures: tuple[int, ...]  # server-side rank-0 vars the block reads


@dataclass(frozen=True)
class ReduceStep:
    equation: Equation


@dataclass(frozen=True)
class ExecutionPlan:
    graph: Graph
    spec: ShardingSpec
    phases: tuple[Any, ...]
    annotations: tuple[str, ...]  # per equation: server|sharded|broadcast|reduce
    local_only: bool
    var_avals: dict[int, AbstractValue] = field(repr=False, default_factory=dict)

    @property
    def comm_steps(self) -> int:
        return sum(isinstance(p, (BroadcastStep, ReduceStep)) for p in self.phases)


def partition(g: Graph, spec: ShardingSpec) -> ExecutionPlan:
    """Assign equations to phases; communication becomes explicit steps."""
    if spec.n_clients != g.client_count:
        raise PlanError(
            f"sharding covers {spec.n_clients} clients, graph has {g.client_count}"
        )
    var_avals: dict[int, AbstractValue] = {}
    for v in g.inputs:
        var_avals[v.id] = v.aval
    for eq in g.equations:
        for v in eq.outputs:
            var_avals[v.id] = v.aval

    if not any(is_comm(eq.primitive) for eq in g.equations):
        phases = (ServerBlock(g.equations),) if g.equations else ()
        return ExecutionPlan(
            g, spec, phases, ("server",) * len(g.equations), True, var_avals
        )

    sharded_vars = {
        v.id for v in g.inputs if v.aval.placement is Placement.CLIENTS
    }
    phases: list[Any] = []
    annotations: list[str] = []
    kind_run: list[Equation] = []
    run_kind: str | None = None

    def flush():
        nonlocal kind_run, run_kind
        if not kind_run:
            return
        if run_kind == "server":
            phases.append(ServerBlock(tuple(kind_run)))
        else:
            captures = []
            defined = set()
            for eq in kind_run:
                for v in eq.inputs:
                    if v.id not in sharded_vars and v.id not in defined:
                        if v.id not in captures:
                            captures.append(v.id)
                for v in eq.outputs:
                    defined.add(v.id)
            phases.append(WorkerBlock(tuple(kind_run), tuple(captures)))
        kind_run, run_kind = [], None

    for eq in g.equations:
        p = eq.primitive
        if p == "broadcast_clients":
            flush()
            phases.append(BroadcastStep(eq))
            annotations.append("broadcast")
            sharded_vars.add(eq.outputs[0].id)
            continue
        if p in ("sum_from_clients", "mean_from_clients"):
            flush()
            phases.append(ReduceStep(eq))
            annotations.append("reduce")
            continue
        on_workers = any(v.aval.placement is Placement.CLIENTS for v in eq.outputs)
        kind = "worker" if on_workers else "server"
        annotations.append("sharded" if on_workers else "server")
        if on_workers:
            for v in eq.outputs:
                sharded_vars.add(v.id)
        if run_kind not in (None, kind):
            flush()
        run_kind = kind
        kind_run.append(eq)
    flush()
    return ExecutionPlan(g, spec, tuple(phases), tuple(annotations), False, var_avals)


# ---------------------------------------------------------------------------
# shared per-worker block evaluation

def _run_block(
    block: WorkerBlock,
    env: dict[int, Tensor],
    var_avals: dict[int, AbstractValue],
    loop: bool,
) -> None:
    if not loop:
        eval_equations(block.equations, env, client_count=0)
        return
    # for-loop baseline: evaluate the block one client slice at a time
    extent = None
    for eq in block.equations:
        for v in eq.inputs:
            if var_avals[v.id].placement is Placement.CLIENTS and v.id in env:
                extent = env[v.id].shape[0]
                break
        if extent is not None:
            break
    if extent is None:
        eval_equations(block.equations, env, client_count=0)
        return
    per_client: dict[int, list[Tensor]] = {}
    for i in range(extent):
        slice_env: dict[int, Tensor] = {}
        for eq in block.equations:
            for v in eq.inputs:
                if v.id in slice_env or v.id not in env:
                    continue
                t = env[v.id]
                if var_avals[v.id].placement is Placement.CLIENTS:
                    slice_env[v.id] = Tensor(t.numpy()[i : i + 1])
                else:
                    slice_env[v.id] = t
        eval_equations(block.equations, slice_env, client_count=0)
        for eq in block.equations:
            for v in eq.outputs:
                per_client.setdefault(v.id, []).append(slice_env[v.id])
    for vid, parts in per_client.items():
        env[vid] = tc.concat_leading(parts)


def _reduce_partial(eq: Equation, env: dict[int, Tensor]) -> Tensor:
    return tc.reduce_leading("sum", env[eq.inputs[0].id], keepdims=True)


def _combine_partials(eq: Equation, partials: Sequence[Tensor], n_clients: int) -> Tensor:
    stacked = np.stack([p.numpy()[0] for p in partials], axis=0)
    total = tc.reduce_leading("sum", Tensor(stacked), keepdims=True)
    if eq.primitive == "mean_from_clients":
        # same division the eager mean applies after its tree sum
        return Tensor(total.numpy() / total.dtype.type(n_clients))
    return total


# ---------------------------------------------------------------------------
# in-process executors (loop and thread)

class _InProcessExecutor:
    def __init__(self, plan: ExecutionPlan, loop: bool):
        self.plan = plan
        self.loop = loop
        self.pool = (
            ThreadPoolExecutor(max_workers=plan.spec.worker_count)
            if not loop and plan.spec.worker_count > 1
            else None
        )
        self.worker_envs: list[dict[int, Tensor]] = [{} for _ in plan.spec.blocks]

    def bind(self, coerced: list[Tensor]) -> dict[int, Tensor]:
        coord_env: dict[int, Tensor] = {}
        for var, value in zip(self.plan.graph.inputs, coerced):
            if var.aval.placement is Placement.CLIENTS:
                for env, (start, stop) in zip(self.worker_envs, self.plan.spec.blocks):
                    env[var.id] = Tensor(value.numpy()[start:stop])
            coord_env[var.id] = value
        return coord_env

    def run_round(self, coord_env: dict[int, Tensor], timings: dict[str, float] | None = None) -> None:
        plan = self.plan
        for phase in plan.phases:
            t0 = time.perf_counter()
            if isinstance(phase, ServerBlock):
                eval_equations(phase.equations, coord_env, plan.graph.client_count)
                key = "server"
            elif isinstance(phase, BroadcastStep):
                eq = phase.equation
                value = coord_env[eq.inputs[0].id]
                for env, (start, stop) in zip(self.worker_envs, plan.spec.blocks):
                    env[eq.outputs[0].id] = tc.tile_leading(value, stop - start)
                key = "broadcast"
            elif isinstance(phase, WorkerBlock):
                for env in self.worker_envs:
                    for vid in phase.captures:
                        env[vid] = coord_env[vid]
                if self.pool is None:
                    for env in self.worker_envs:
                        _run_block(phase, env, plan.var_avals, self.loop)
                else:
                    list(
                        self.pool.map(
                            lambda env: _run_block(phase, env, plan.var_avals, False),
                            self.worker_envs,
                        )
                    )
                key = "local"
            elif isinstance(phase, ReduceStep):
                eq = phase.equation
                partials = [_reduce_partial(eq, env) for env in self.worker_envs]
                coord_env[eq.outputs[0].id] = _combine_partials(
                    eq, partials, plan.graph.client_count
                )
                key = "reduce"
            else:
                raise ExecutionError(f"unknown phase {phase!r}")
            if timings is not None:
                timings[key] = timings.get(key, 0.0) + (time.perf_counter() - t0)

    def gather(self, coord_env: dict[int, Tensor], vid: int) -> Tensor:
        return tc.concat_leading([env[vid] for env in self.worker_envs])

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()


# ---------------------------------------------------------------------------
# pinned worker processes

def _worker_main(conn) -> None:
    env: dict[int, Tensor] = {}
    phases: list[WorkerBlock] = []
    block_size = 0
    try:
        while True:
            msg = conn.recv()
            tag = msg[0]
            if tag == "bind":
                _, blocks, client_arrays, size = msg
                phases = blocks
                block_size = size
                env = {vid: Tensor(arr) for vid, arr in client_arrays.items()}
            elif tag == "round":
                for op in msg[1]:
                    if op[0] == "put":
                        env[op[1]] = tc.tile_leading(Tensor(op[2]), block_size)
                    elif op[0] == "capture":
                        env[op[1]] = Tensor(op[2])
                    elif op[0] == "run":
                        blk = phases[op[1]]
                        eval_equations(blk.equations, env, client_count=0)
                    elif op[0] == "reduce":
                        partial = tc.reduce_leading("sum", env[op[1]], keepdims=True)
                        conn.send(("ok", partial.numpy()))
                    elif op[0] == "get":
                        conn.send(("ok", env[op[1]].numpy()))
            elif tag == "stop":
                return
    except EOFError:
        return
    except Exception as e:  # surface the failure; the parent raises ExecutionError
        try:
            conn.send(("err", f"{type(e).__name__}: {e}"))
        except OSError:
            pass


class _ProcessExecutor:
    def __init__(self, plan: ExecutionPlan):
        import multiprocessing as mp

        self.plan = plan
        ctx = mp.get_context()
        self.conns = []
        self.procs = []
        self.worker_blocks: list[WorkerBlock] = [
            p for p in plan.phases if isinstance(p, WorkerBlock)
        ]
        self.block_index = {id(p): i for i, p in enumerate(self.worker_blocks)}
        for _ in plan.spec.blocks:
            parent, child = ctx.Pipe()
            proc = ctx.Process(target=_worker_main, args=(child,), daemon=True)
            proc.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(proc)
        self.pending: list[list] = [[] for _ in self.conns]

    def bind(self, coerced: list[Tensor]) -> dict[int, Tensor]:
        coord_env: dict[int, Tensor] = {}
        for w, (start, stop) in enumerate(self.plan.spec.blocks):
            client_arrays = {}
            for var, value in zip(self.plan.graph.inputs, coerced):
                if var.aval.placement is Placement.CLIENTS:
                    client_arrays[var.id] = value.numpy()[start:stop]
            self._send(w, ("bind", self.worker_blocks, client_arrays, stop - start))
        for var, value in zip(self.plan.graph.inputs, coerced):
            coord_env[var.id] = value
        return coord_env

    def _send(self, w: int, msg) -> None:
        try:
            self.conns[w].send(msg)
        except (BrokenPipeError, OSError) as e:
            raise ExecutionError(f"worker {w} is gone: {e}") from e

    def _flush(self) -> None:
        for w, ops in enumerate(self.pending):
            if ops:
                self._send(w, ("round", ops))
                self.pending[w] = []

    def _recv(self, w: int):
        try:
            status, payload = self.conns[w].recv()
        except (EOFError, OSError) as e:
            raise ExecutionError(f"worker {w} died mid-round: {e}") from e
        if status != "ok":
            raise ExecutionError(f"worker {w} failed: {payload}")
        return payload

    def run_round(self, coord_env: dict[int, Tensor], timings: dict[str, float] | None = None) -> None:
        plan = self.plan
        for phase in plan.phases:
            t0 = time.perf_counter()
            if isinstance(phase, ServerBlock):
                eval_equations(phase.equations, coord_env, plan.graph.client_count)
                key = "server"
            elif isinstance(phase, BroadcastStep):
                eq = phase.equation
                arr = coord_env[eq.inputs[0].id].numpy()
                for ops in self.pending:
                    ops.append(("put", eq.outputs[0].id, arr))
                key = "broadcast"
            elif isinstance(phase, WorkerBlock):
                for w, ops in enumerate(self.pending):
                    for vid in phase.captures:
                        ops.append(("capture", vid, coord_env[vid].numpy()))
                    ops.append(("run", self.block_index[id(phase)]))
                key = "local"
            elif isinstance(phase, ReduceStep):
                eq = phase.equation
                for ops in self.pending:
                    ops.append(("reduce", eq.inputs[0].id))
                self._flush()
                partials = [Tensor(self._recv(w)) for w in range(len(self.conns))]
                coord_env[eq.outputs[0].id] = _combine_partials(
                    eq, partials, plan.graph.client_count
                )
                key = "reduce"
            else:
                raise ExecutionError(f"unknown phase {phase!r}")
            if timings is not None:
                timings[key] = timings.get(key, 0.0) + (time.perf_counter() - t0)
        self._flush()

    def gather(self, coord_env: dict[int, Tensor], vid: int) -> Tensor:
        parts = []
        for w in range(len(self.conns)):
            self.pending[w].append(("get", vid))
            self._send(w, ("round", self.pending[w]))
            self.pending[w] = []
            parts.append(Tensor(self._recv(w)))
        return tc.concat_leading(parts)

    def close(self) -> None:
        for w, conn in enumerate(self.conns):
            try:
                conn.send(("stop",))
                conn.close()
            except OSError:
                pass
        for proc in self.procs:
            proc.join(timeout=5)
            if proc.is_alive():
                proc.terminate()


def _make_executor(plan: ExecutionPlan, backend: str):
    if backend not in BACKENDS:
        raise PlanError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if backend == "loop" and plan.spec.worker_count != 1:
        raise PlanError("the loop baseline runs with exactly one worker")
    if backend == "process":
        return _ProcessExecutor(plan)
    return _InProcessExecutor(plan, loop=(backend == "loop"))


def _coerce_all(g: Graph, inputs: Sequence) -> list[Tensor]:
    if len(inputs) != len(g.inputs):
        raise PlanError(f"plan takes {len(g.inputs)} inputs, got {len(inputs)}")
    return [coerce_input(val, var.aval) for val, var in zip(inputs, g.inputs)]


def _collect_outputs(plan: ExecutionPlan, executor, coord_env: dict[int, Tensor]):
    outs = []
    for v in plan.graph.outputs:
        if v.id in coord_env:
            t = coord_env[v.id]
        else:
            t = executor.gather(coord_env, v.id)
        if v.aval.placement is not None:
            outs.append(PlacedTensor(t, v.aval.placement))
        else:
            outs.append(t)
    return outs


def execute_parallel(plan: ExecutionPlan, inputs: Sequence, backend: str = "thread"):
    """Run a plan; outputs match eval_graph on the unpartitioned graph."""
    coerced = _coerce_all(plan.graph, inputs)
    if plan.local_only:
        return eval_graph(plan.graph, coerced, check=False)
    executor = _make_executor(plan, backend)
    try:
        coord_env = executor.bind(coerced)
        executor.run_round(coord_env)
        return _collect_outputs(plan, executor, coord_env)
    finally:
        executor.close()


@dataclass
class BenchReport:
    n_clients: int
    worker_count: int
    backend: str
    repetitions: int
    round_seconds: tuple[float, ...]
    breakdown: dict[str, float]  # mean seconds per phase kind

    @property
    def median_s(self) -> float:
        return statistics.median(self.round_seconds)

    @property
    def median_ms(self) -> float:
        return 1e3 * self.median_s

    def record(self) -> dict:
        steps = {k: round(1e3 * v, 6) for k, v in sorted(self.breakdown.items())}
        return {
            "n": self.n_clients,
            "workers": self.worker_count,
            "backend": self.backend,
            "repetitions": self.repetitions,
            "median_ms": round(self.median_ms, 6),
            "steps_ms": steps,
        }

    def table_row(self) -> str:
        steps = " ".join(
            f"{k}={1e3 * v:.3f}" for k, v in sorted(self.breakdown.items())
        )
        return (
            f"{self.n_clients:>8} {self.worker_count:>8} {self.backend:>8} "
            f"{self.median_ms:>12.3f}  {steps}"
        )

    @staticmethod
    def table_header() -> str:
        return f"{'clients':>8} {'workers':>8} {'backend':>8} {'median_ms':>12}  per-step ms"


def bench_round(
    g: Graph,
    spec: ShardingSpec,
    inputs: Sequence,
    repetitions: int,
    backend: str = "process",
    warmup: int = 1,
) -> BenchReport:
    """Median wall time of repeated rounds on a bound executor."""
    if repetitions < 3:
        raise PlanError(f"need at least 3 repetitions for a median, got {repetitions}")
    plan = partition(g, spec)
    coerced = _coerce_all(plan.graph, inputs)
    if plan.local_only:
        raise PlanError("benchmarking needs a graph with communication steps")
    executor = _make_executor(plan, backend)
    try:
        coord_env = executor.bind(coerced)
        for _ in range(warmup):
            executor.run_round(dict(coord_env))
        rounds = []
        breakdown: dict[str, float] = {}
        for _ in range(repetitions):
            env = dict(coord_env)
            t0 = time.perf_counter()
            executor.run_round(env, breakdown)
            rounds.append(time.perf_counter() - t0)
        mean_breakdown = {k: v / repetitions for k, v in breakdown.items()}
        return BenchReport(
            n_clients=plan.graph.client_count,
            worker_count=plan.spec.worker_count,
            backend=backend,
            repetitions=repetitions,
            round_seconds=tuple(rounds),
            breakdown=mean_breakdown,
        )
    finally:
        executor.close()
