"""Staging tests: programs record the expected equation sequences."""

import numpy as np
import pytest

import fedgraph as fg
from fedgraph import Placement, TraceError

from corpus import clients_spec, server_spec


def prims(g):
    return [eq.primitive for eq in g.equations]


def nonconst_prims(g):
    return [p for p in prims(g) if p != "constant"]


class TestRecording:
    def test_demo_program_records_three_equations(self):
        def program(x):
            per = fg.federated_broadcast(x)
            doubled = fg.federated_map(lambda v: 2.0 * v, per)
            return fg.federated_sum(doubled)

        g = fg.trace(program, server_spec(), client_count=3)
        assert nonconst_prims(g) == ["broadcast_clients", "scale", "sum_from_clients"]
        assert len(g.inputs) == 1
        assert len(g.outputs) == 1
        assert g.outputs[0].aval.placement is Placement.SERVER
        assert g.outputs[0].aval.shape == (1,)

    def test_loss_program_equation_order(self):
        def program(model, data):
            per = fg.federated_broadcast(model)
            losses = fg.federated_map(
                lambda m, d: 0.5 * ((fg.dot(m, d) - 1.0) ** 2), (per, data)
            )
            return fg.federated_mean(losses)

        g = fg.trace(program, (server_spec(2), clients_spec(4, 2)), client_count=4)
        assert nonconst_prims(g) == [
            "broadcast_clients",
            "batched_dot",
            "sub",
            "integer_pow",
            "scale",
            "mean_from_clients",
        ]

    def test_scalar_literals_become_constant_equations(self):
        g = fg.trace(lambda x: x + 1.0, server_spec(), client_count=1)
        consts = [eq for eq in g.equations if eq.primitive == "constant"]
        assert len(consts) == 1
        value = consts[0].params["value"]
        assert value.shape == ()
        assert value == np.float64(1.0)
        # the add consumes the constant's output
        add = next(eq for eq in g.equations if eq.primitive == "add")
        assert consts[0].outputs[0] in add.inputs

    def test_avals_widen_with_client_count(self):
        def program(x):
            return fg.federated_broadcast(x)

        for n in (1, 2, 5):
            g = fg.trace(program, server_spec(3), client_count=n)
            assert g.outputs[0].aval.shape == (n, 3)
            assert g.outputs[0].aval.placement is Placement.CLIENTS


class TestInputSpecs:
    def test_server_spec_needs_unit_leading_axis(self):
        bad = fg.AbstractValue((2, 3), np.dtype("float64"), Placement.SERVER)
        with pytest.raises(TraceError):
            fg.trace(lambda x: x, bad, client_count=2)

    def test_clients_spec_needs_matching_extent(self):
        bad = clients_spec(3)
        with pytest.raises(TraceError):
            fg.trace(lambda x: x, bad, client_count=4)

    def test_spec_leaves_must_be_abstract_values(self):
        with pytest.raises(TraceError):
            fg.trace(lambda x: x, np.zeros(3), client_count=1)

    def test_client_count_must_be_positive(self):
        with pytest.raises(TraceError):
            fg.trace(lambda x: x, server_spec(), client_count=0)

    def test_structured_specs_rebuild_positionally(self):
        def program(pair, lone):
            a, b = pair
            return fg.federated_sum(a + b), lone

        g = fg.trace(
            program,
            ((clients_spec(2, 3), clients_spec(2, 3)), server_spec()),
            client_count=2,
        )
        assert len(g.inputs) == 3
        assert len(g.outputs) == 2

    def test_spec_of_concrete_values(self):
        from fedgraph.trace import spec_of

        t = fg.tensor(np.arange(3.0))
        assert spec_of(t) == fg.AbstractValue((3,), np.dtype("float64"), None)
        p = fg.place_server(np.arange(3.0))
        assert spec_of(p).placement is Placement.SERVER


class TestOutputs:
    def test_output_must_come_from_this_trace(self):
        stray = {}

        def first(x):
            stray["v"] = x
            return x

        fg.trace(first, server_spec(), client_count=1)
        with pytest.raises(TraceError):
            fg.trace(lambda x: stray["v"], server_spec(), client_count=1)

    def test_constant_only_program_rejected(self):
        # outputs must be TraceValues, not raw floats
        with pytest.raises(TraceError):
            fg.trace(lambda x: 1.0, server_spec(), client_count=1)

    def test_structured_output_flattening(self):
        def program(x):
            s = fg.federated_sum(fg.federated_broadcast(x))
            return {"total": s, "orig": x}

        g = fg.trace(program, server_spec(), client_count=3)
        assert len(g.outputs) == 2


class TestMapStaging:
    def _program(self, inline):
        def program(x):
            per = fg.federated_broadcast(x)
            return fg.federated_sum(
                fg.federated_map(lambda v: v * v, per, inline=inline)
            )

        return program

    def test_inline_map_splices_body(self):
        g = fg.trace(self._program(True), server_spec(), client_count=4)
        assert "map_clients" not in prims(g)
        assert "mul" in prims(g)

    def test_nested_map_keeps_body_graph(self):
        g = fg.trace(self._program(False), server_spec(), client_count=4)
        maps = [eq for eq in g.equations if eq.primitive == "map_clients"]
        assert len(maps) == 1
        body = maps[0].params["body"]
        assert isinstance(body, fg.Graph)
        # body works on unit-leading slices
        assert all(v.aval.shape[0] == 1 for v in body.inputs)
        assert nonconst_prims(body) == ["mul"]

    def test_inline_and_nested_agree_numerically(self):
        x = fg.place_server(1.5)
        a = fg.eval_graph(fg.trace(self._program(True), server_spec(), 4), [x])
        b = fg.eval_graph(fg.trace(self._program(False), server_spec(), 4), [x])
        np.testing.assert_array_equal(a[0].tensor.numpy(), b[0].tensor.numpy())


class TestOperatorSugar:
    def test_operator_program_records_and_evaluates(self):
        def program(x):
            return fg.federated_sum(fg.federated_broadcast(-(x * 2.0) + x / 2.0))

        g = fg.trace(program, server_spec(2), 3)
        assert nonconst_prims(g) == [
            "scale",
            "neg",
            "div",
            "add",
            "broadcast_clients",
            "sum_from_clients",
        ]
        xs = fg.place_server(np.array([3.0, -1.0]))
        (out,) = fg.eval_graph(g, [xs])
        # 3 * (-2x + x/2) = -4.5x
        np.testing.assert_array_equal(
            out.tensor.numpy(), np.array([[-13.5, 4.5]])
        )

    def test_reflected_subtraction_orders_operands(self):
        g = fg.trace(lambda x: 1.0 - x, server_spec(), 1)
        (out,) = fg.eval_graph(g, [fg.place_server(0.25)])
        assert out.tensor.numpy()[0] == 0.75

    def test_pow_requires_integer_exponent(self):
        with pytest.raises(TraceError):
            fg.trace(lambda x: x ** 0.5, server_spec(), 1)
        with pytest.raises(TraceError):
            fg.trace(lambda x: x ** (-1), server_spec(), 1)


class TestCrossTrace:
    def test_mixing_values_from_two_builders_rejected(self):
        leak = {}

        def capture(x):
            leak["x"] = x
            return x

        fg.trace(capture, server_spec(), client_count=2)

        def mixes(y):
            return y + leak["x"]

        with pytest.raises(TraceError):
            fg.trace(mixes, server_spec(), client_count=2)


class TestGraphEquality:
    def test_same_program_traces_equal(self):
        def program(x):
            return fg.federated_mean(fg.federated_broadcast(x * 3.0))

        a = fg.trace(program, server_spec(2), 3)
        b = fg.trace(program, server_spec(2), 3)
        assert fg.graph_equal(a, b)

    def test_different_client_count_not_equal(self):
        def program(x):
            return fg.federated_mean(fg.federated_broadcast(x))

        a = fg.trace(program, server_spec(2), 3)
        b = fg.trace(program, server_spec(2), 4)
        assert not fg.graph_equal(a, b)

    def test_different_constant_not_equal(self):
        a = fg.trace(lambda x: x + 1.0, server_spec(), 1)
        b = fg.trace(lambda x: x + 2.0, server_spec(), 1)
        assert not fg.graph_equal(a, b)
