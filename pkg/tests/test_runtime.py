"""Sharded execution must reproduce the single-machine evaluator bit for bit."""

import numpy as np
import pytest

import fedgraph as fg
from fedgraph import PlanError, ShardingSpec
from fedgraph.ir import is_comm
from fedgraph.runtime import (
    BroadcastStep,
    ReduceStep,
    ServerBlock,
    WorkerBlock,
    bench_round,
    execute_parallel,
    partition,
)

from corpus import ENTRIES, by_name, clients_spec, placed_inputs, random_arrays, server_spec

N = 8
WORKER_COUNTS = (1, 2, 4, 8)


def arrays_to_numpy(outs):
    return [o.tensor.numpy() if hasattr(o, "tensor") else o.numpy() for o in outs]


class TestShardingSpec:
    def test_balanced_covers_all_clients(self):
        for n in range(1, 12):
            for w in range(1, n + 1):
                spec = ShardingSpec.balanced(n, w)
                assert spec.n_clients == n
                assert spec.blocks[0][0] == 0
                sizes = [stop - start for start, stop in spec.blocks]
                assert sum(sizes) == n
                assert max(sizes) - min(sizes) <= 1
                for (a0, a1), (b0, b1) in zip(spec.blocks, spec.blocks[1:]):
                    assert a1 == b0

    def test_more_workers_than_clients_rejected(self):
        with pytest.raises(PlanError):
            ShardingSpec.balanced(3, 4)

    def test_zero_workers_rejected(self):
        with pytest.raises(PlanError):
            ShardingSpec.balanced(3, 0)

    def test_manual_blocks_validated(self):
        with pytest.raises(PlanError):
            ShardingSpec(2, ((0, 2), (3, 4)))  # gap
        with pytest.raises(PlanError):
            ShardingSpec(2, ((0, 2), (2, 2)))  # empty
        with pytest.raises(PlanError):
            ShardingSpec(2, ((0, 4),))  # wrong count


class TestPartition:
    def test_comm_steps_match_comm_equations(self):
        for entry in ENTRIES:
            g = entry.graph(N)
            plan = partition(g, ShardingSpec.balanced(N, 4))
            n_comm = sum(is_comm(eq.primitive) for eq in g.equations)
            if n_comm == 0:
                assert plan.local_only, entry.name
            else:
                assert plan.comm_steps == n_comm, entry.name
                assert not plan.local_only, entry.name

    def test_annotations_cover_every_equation(self):
        g = by_name("loss_d4").graph(N)
        plan = partition(g, ShardingSpec.balanced(N, 2))
        assert len(plan.annotations) == len(g.equations)
        assert set(plan.annotations) <= {"server", "sharded", "broadcast", "reduce"}

    def test_lowered_graph_is_local_only(self):
        g = fg.lower(by_name("loss_d4").graph(N))
        plan = partition(g, ShardingSpec.balanced(N, 2))
        assert plan.local_only
        assert plan.comm_steps == 0

    def test_phase_order_for_loss(self):
        g = by_name("loss_d4").graph(N)
        plan = partition(g, ShardingSpec.balanced(N, 4))
        kinds = [type(p).__name__ for p in plan.phases]
        # the scalar 1.0 lives on the coordinator, splitting the sharded run
        assert kinds == [
            "BroadcastStep",
            "WorkerBlock",
            "ServerBlock",
            "WorkerBlock",
            "ReduceStep",
        ]
        worker_blocks = [p for p in plan.phases if isinstance(p, WorkerBlock)]
        # second block reads the coordinator-resident constant
        assert worker_blocks[1].captures

    def test_client_count_mismatch_rejected(self):
        g = by_name("loss_d4").graph(N)
        with pytest.raises(PlanError):
            partition(g, ShardingSpec.balanced(N + 1, 2))


class TestExecuteParallel:
    @pytest.mark.parametrize("backend", ["thread", "loop"])
    def test_matches_eval_bitwise(self, backend):
        rng = np.random.default_rng(99)
        for entry in ENTRIES:
            g = entry.graph(N)
            arrays = random_arrays(g, rng)
            want = arrays_to_numpy(fg.eval_graph(g, placed_inputs(g, arrays)))
            worker_counts = (1,) if backend == "loop" else WORKER_COUNTS
            for w in worker_counts:
                plan = partition(g, ShardingSpec.balanced(N, w))
                got = arrays_to_numpy(
                    execute_parallel(plan, placed_inputs(g, arrays), backend=backend)
                )
                for a, b in zip(want, got):
                    np.testing.assert_array_equal(
                        a, b, err_msg=f"{entry.name} w={w} {backend}"
                    )

    def test_process_backend_matches_eval_bitwise(self):
        rng = np.random.default_rng(17)
        for name in ("loss_d4", "fedavg_round", "double_sum"):
            g = by_name(name).graph(N)
            arrays = random_arrays(g, rng)
            want = arrays_to_numpy(fg.eval_graph(g, placed_inputs(g, arrays)))
            for w in (1, 2, 8):
                plan = partition(g, ShardingSpec.balanced(N, w))
                got = arrays_to_numpy(
                    execute_parallel(plan, placed_inputs(g, arrays), backend="process")
                )
                for a, b in zip(want, got):
                    np.testing.assert_array_equal(a, b, err_msg=f"{name} w={w}")

    def test_unaligned_worker_count_stays_within_tolerance(self):
        # 8 clients over 3 workers re-associates the reduction tree, so
        # agreement is to rounding, not bitwise
        g = by_name("loss_d4").graph(N)
        arrays = random_arrays(g, np.random.default_rng(21))
        want = arrays_to_numpy(fg.eval_graph(g, placed_inputs(g, arrays)))
        for backend in ("thread", "process"):
            plan = partition(g, ShardingSpec.balanced(N, 3))
            got = arrays_to_numpy(
                execute_parallel(plan, placed_inputs(g, arrays), backend=backend)
            )
            for a, b in zip(want, got):
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_clients_placed_outputs_are_gathered(self):
        def program(x, data):
            per = fg.federated_broadcast(x)
            scaled = fg.federated_map(lambda m, d: m * d, (per, data))
            return fg.federated_sum(scaled), scaled

        g = fg.trace(program, (server_spec(2), clients_spec(N, 2)), N)
        rng = np.random.default_rng(5)
        arrays = random_arrays(g, rng)
        want = arrays_to_numpy(fg.eval_graph(g, placed_inputs(g, arrays)))
        for backend, w in (("thread", 4), ("process", 2)):
            plan = partition(g, ShardingSpec.balanced(N, w))
            got = arrays_to_numpy(
                execute_parallel(plan, placed_inputs(g, arrays), backend=backend)
            )
            assert got[1].shape == (N, 2)
            for a, b in zip(want, got):
                np.testing.assert_array_equal(a, b)

    def test_local_only_plan_runs_on_server(self):
        g = by_name("server_only").graph(2)
        plan = partition(g, ShardingSpec.balanced(2, 1))
        assert plan.local_only
        (out,) = execute_parallel(plan, [fg.place_server(3.0)])
        assert out.tensor.numpy()[0] == 0.5 * 9.0 - 2.0

    def test_loop_backend_needs_single_worker(self):
        g = by_name("loss_d4").graph(N)
        plan = partition(g, ShardingSpec.balanced(N, 2))
        with pytest.raises(PlanError):
            execute_parallel(plan, placed_inputs(g, random_arrays(g, np.random.default_rng(0))), backend="loop")

    def test_unknown_backend_rejected(self):
        g = by_name("loss_d4").graph(N)
        plan = partition(g, ShardingSpec.balanced(N, 1))
        with pytest.raises(PlanError):
            execute_parallel(plan, placed_inputs(g, random_arrays(g, np.random.default_rng(0))), backend="gpu")

    def test_input_arity_checked(self):
        g = by_name("loss_d4").graph(N)
        plan = partition(g, ShardingSpec.balanced(N, 1))
        with pytest.raises(PlanError):
            execute_parallel(plan, [])


class TestBench:
    def _graph_and_inputs(self):
        g = by_name("loss_d4").graph(N)
        arrays = random_arrays(g, np.random.default_rng(0))
        return g, placed_inputs(g, arrays)

    def test_report_fields(self):
        g, inputs = self._graph_and_inputs()
        report = bench_round(
            g, ShardingSpec.balanced(N, 2), inputs, repetitions=3, backend="thread"
        )
        assert report.median_s > 0
        assert report.median_ms == pytest.approx(report.median_s * 1e3)
        rec = report.record()
        assert rec["n"] == N
        assert rec["workers"] == 2
        assert rec["backend"] == "thread"
        assert rec["repetitions"] == 3
        assert rec["median_ms"] > 0
        assert set(rec["steps_ms"])  # at least one phase timed

    def test_too_few_repetitions_rejected(self):
        g, inputs = self._graph_and_inputs()
        with pytest.raises(PlanError):
            bench_round(g, ShardingSpec.balanced(N, 2), inputs, repetitions=2)

    def test_comm_free_graph_rejected(self):
        g = by_name("server_only").graph(2)
        with pytest.raises(PlanError):
            bench_round(
                g,
                ShardingSpec.balanced(2, 1),
                [fg.place_server(1.0)],
                repetitions=3,
                backend="thread",
            )

    def test_table_row_is_printable(self):
        g, inputs = self._graph_and_inputs()
        report = bench_round(
            g, ShardingSpec.balanced(N, 1), inputs, repetitions=3, backend="loop"
        )
        header = type(report).table_header()
        row = report.table_row()
        assert len(header.splitlines()) == 1
        assert len(row.splitlines()) == 1
