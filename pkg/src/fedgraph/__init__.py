"""Federated computations as traced array programs.

Values carry a placement (server or clients) realized as a leading array
axis. Programs written with the four federated building blocks trace to an
SSA graph whose communication steps stay first-class equations; the graph
can be evaluated, differentiated (forward and reverse, staying inside the
same primitive set), lowered to pure local array ops, partitioned across
workers along the clients axis, and serialized.
"""

from .algorithms import (
    Cohort,
    OptState,
    fed_avg_graph,
    fed_avg_round,
    fed_sgd_step,
    federated_loss,
    loss_fn,
    loss_grad_graph,
    loss_graph,
    optimum_of,
    synth_dataset,
)
from .autodiff import check_closure, dce, grad, inline_maps, jvp
from .errors import (
    AutodiffError,
    ExecutionError,
    FedgraphError,
    GraphError,
    ParseError,
    PlacementError,
    PlanError,
    ShapeError,
    TraceError,
)
from .export import (
    comm_names,
    comm_summary,
    load_graph,
    parse_canonical,
    save_graph,
    serialize_canonical,
    serialize_text,
)
from .fedprims import (
    federated_broadcast,
    federated_map,
    federated_mean,
    federated_sum,
)
from .interp import eval_graph
from .ir import AbstractValue, Equation, Graph, Var, graph_equal, validate_graph
from .lower import lower
from .placement import (
    PlacedTensor,
    Placement,
    client_count,
    client_slice,
    place_clients,
    place_server,
    unplace,
    validate_structure,
)
from .runtime import (
    BenchReport,
    ExecutionPlan,
    ShardingSpec,
    bench_round,
    execute_parallel,
    partition,
)
from .tensor import Tensor, tensor, zeros, ones
from .trace import dot, outer, trace

__version__ = "0.1.0"

__all__ = [
    "AbstractValue",
    "AutodiffError",
    "BenchReport",
    "Cohort",
    "Equation",
    "ExecutionError",
    "ExecutionPlan",
    "FedgraphError",
    "Graph",
    "GraphError",
    "OptState",
    "ParseError",
    "PlacedTensor",
    "Placement",
    "PlacementError",
    "PlanError",
    "ShapeError",
    "Tensor",
    "TraceError",
    "Var",
    "bench_round",
    "check_closure",
    "client_count",
    "client_slice",
    "comm_names",
    "comm_summary",
    "dce",
    "dot",
    "eval_graph",
    "execute_parallel",
    "fed_avg_graph",
    "fed_avg_round",
    "fed_sgd_step",
    "federated_broadcast",
    "federated_loss",
    "federated_map",
    "federated_mean",
    "federated_sum",
    "grad",
    "graph_equal",
    "inline_maps",
    "jvp",
    "load_graph",
    "loss_fn",
    "loss_grad_graph",
    "loss_graph",
    "lower",
    "ones",
    "optimum_of",
    "outer",
    "parse_canonical",
    "partition",
    "place_clients",
    "place_server",
    "save_graph",
    "serialize_canonical",
    "serialize_text",
    "synth_dataset",
    "tensor",
    "trace",
    "unplace",
    "validate_graph",
    "validate_structure",
    "zeros",
]
