"""Command line driver.

Subcommands: demo (broadcast/double/sum sanity program), gradcheck
(finite-difference check of the federated-loss gradient), export (graph
serialization), bench (round timing across cohort sizes), train (FedSGD or
FedAvg on a synthetic cohort).

Exit codes: 0 on success, 1 when a check or threshold fails, 2 on usage
errors. --json-lines switches each command from human-readable text to one
JSON record per line.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .algorithms import (
    OptState,
    fed_avg_graph,
    fed_avg_round,
    fed_sgd_step,
    federated_loss,
    loss_grad_graph,
    loss_graph,
    synth_dataset,
)
from .autodiff import grad
from .errors import FedgraphError
from .export import serialize_canonical, serialize_text
from .fedprims import federated_broadcast, federated_map, federated_sum
from .interp import eval_graph
from .ir import AbstractValue
from .placement import Placement, PlacedTensor
from .runtime import BenchReport, ShardingSpec, bench_round
from .tensor import DEFAULT_DTYPE, tensor, zeros
from .trace import trace

EXPORT_DIM = 2  # model dimension used by `export`, matching the worked examples


def broadcast_double_and_sum(x):
    """Server scalar in, 2 * n * x back at the server."""
    xb = federated_broadcast(x)
    doubled = federated_map(lambda v: 2.0 * v, xb)
    return federated_sum(doubled)


def _emit(args, record: dict, text: str) -> None:
    if args.json_lines:
        print(json.dumps(record, sort_keys=True))
    else:
        print(text)


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _nonnegative_float(value: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {value!r}")
    if not np.isfinite(x) or x < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {value!r}")
    return x


def _clients_csv(value: str) -> tuple[int, ...]:
    try:
        ns = tuple(int(part) for part in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated int list, got {value!r}")
    if not ns or any(n < 1 for n in ns):
        raise argparse.ArgumentTypeError(f"client counts must be positive, got {value!r}")
    return ns


# ---------------------------------------------------------------------------
# subcommands

def cmd_demo(args) -> int:
    g = trace(
        broadcast_double_and_sum,
        AbstractValue((1,), DEFAULT_DTYPE, Placement.SERVER),
        args.clients,
    )
    (out,) = eval_graph(g, [args.x], check=False)
    result = out.item()
    shown = int(result) if float(result).is_integer() else result
    _emit(
        args,
        {"command": "demo", "clients": args.clients, "x": args.x, "result": result},
        f"{shown}",
    )
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    n, d = args.clients, args.dim
    lg = loss_graph(n, d)
    gg = loss_grad_graph(n, d)
    worst = 0.0
    for _ in range(args.trials):
        model = rng.standard_normal((1, d))
        data = PlacedTensor(tensor(rng.standard_normal((n, d))), Placement.CLIENTS)

        def loss_at(m):
            pt = PlacedTensor(tensor(m), Placement.SERVER)
            return eval_graph(lg, [pt, data], check=False)[0].item()

        (gout,) = eval_graph(
            gg, [PlacedTensor(tensor(model), Placement.SERVER), data], check=False
        )
        analytic = gout.tensor.numpy()[0]
        for i in range(d):
            h = 1e-6 * (1.0 + abs(model[0, i]))
            bumped = model.copy()
            bumped[0, i] += h
            f_plus = loss_at(bumped)
            bumped[0, i] = model[0, i] - h
            f_minus = loss_at(bumped)
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(analytic[i] - fd) / (1.0 + abs(fd))
            worst = max(worst, float(rel))
    ok = worst <= args.tol
    _emit(
        args,
        {
            "command": "gradcheck",
            "clients": n,
            "dim": d,
            "trials": args.trials,
            "seed": args.seed,
            "max_rel_err": worst,
            "tol": args.tol,
            "ok": ok,
        },
        f"gradcheck {'ok' if ok else 'FAILED'}: max relative error {worst:.3e} "
        f"(tolerance {args.tol:.1e}, {args.trials} trials)",
    )
    return 0 if ok else 1


def cmd_export(args) -> int:
    n = args.clients
    if args.program == "loss":
        g = loss_graph(n, EXPORT_DIM)
    elif args.program == "grad-loss":
        g = grad(loss_graph(n, EXPORT_DIM), wrt=0)
    else:
        g = fed_avg_graph(n, batch=1, dim=EXPORT_DIM, client_lr=0.1, local_steps=4)
    if args.format == "text":
        text = serialize_text(g) + "\n"
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        else:
            sys.stdout.write(text)
    else:
        if not args.out:
            raise _Usage("--format canonical requires --out PATH")
        with open(args.out, "wb") as f:
            f.write(serialize_canonical(g))
    return 0


def cmd_bench(args) -> int:
    batch = 8
    rows: list[BenchReport] = []
    if not args.json_lines:
        print(BenchReport.table_header())
    for n in args.clients_list:
        cohort = synth_dataset(n, batch, args.model_dim, seed=args.seed, noise=0.3)
        g = fed_avg_graph(n, batch, args.model_dim, client_lr=0.1, local_steps=args.local_steps)
        inputs = [PlacedTensor(zeros((1, args.model_dim)), Placement.SERVER)] + [
            PlacedTensor(col, Placement.CLIENTS) for col in cohort.batch_columns()
        ]
        if args.workers == "equal":
            spec = ShardingSpec.balanced(n, n)
            backend = "process"
        else:
            spec = ShardingSpec.balanced(n, 1)
            backend = "loop"
        report = bench_round(g, spec, inputs, repetitions=args.rounds, backend=backend)
        rows.append(report)
        if args.json_lines:
            print(json.dumps(report.record(), sort_keys=True))
        else:
            print(report.table_row())
    return 0


def cmd_train(args) -> int:
    cohort = synth_dataset(args.clients, 1, args.dim, seed=args.seed, noise=args.noise)
    model = PlacedTensor(zeros((1, args.dim)), Placement.SERVER)
    opt = OptState(args.lr)
    for step in range(args.steps):
        loss = federated_loss(model, cohort).item()
        _emit(
            args,
            {"command": "train", "step": step, "loss": loss},
            f"step {step:4d}  loss {loss:.6e}",
        )
        if args.algo == "fedsgd":
            model, opt = fed_sgd_step(model, cohort, opt)
        else:
            model = fed_avg_round(model, cohort, args.lr, args.local_steps)
    final = federated_loss(model, cohort).item()
    ok = final <= args.threshold
    _emit(
        args,
        {
            "command": "train",
            "algo": args.algo,
            "steps": args.steps,
            "final_loss": final,
            "threshold": args.threshold,
            "ok": ok,
        },
        f"final loss {final:.6e} after {args.steps} steps "
        f"({'<=' if ok else 'EXCEEDS'} threshold {args.threshold:.1e})",
    )
    return 0 if ok else 1


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgraph",
        description="Federated computations as traced graphs: demos, checks, exports, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--json-lines",
        action="store_true",
        help="emit one JSON record per line instead of human-readable text",
    )

    p = sub.add_parser("demo", parents=[common], help="run the broadcast/double/sum program")
    p.add_argument("--clients", type=_positive_int, default=3)
    p.add_argument("--x", type=float, default=5.0, help="server scalar input")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--clients", type=_positive_int, default=4)
    p.add_argument("--dim", type=_positive_int, default=8)
    p.add_argument("--trials", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=_nonnegative_float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", parents=[common], help="serialize a graph")
    p.add_argument("--program", choices=("loss", "grad-loss", "fedavg"), required=True)
    p.add_argument("--clients", type=_positive_int, default=2)
    p.add_argument("--format", choices=("text", "canonical"), default="text")
    p.add_argument("--out", default=None, help="output path (canonical form requires it)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", parents=[common], help="time rounds across cohort sizes")
    p.add_argument("--model-dim", type=_positive_int, default=512)
    p.add_argument("--clients-list", type=_clients_csv, default=(1, 2, 4, 8))
    p.add_argument(
        "--workers",
        choices=("equal", "1"),
        default="equal",
        help="'equal': one worker per client; '1': the sequential per-client loop",
    )
    p.add_argument("--rounds", type=_positive_int, default=5, help="timed repetitions (>= 3)")
    p.add_argument("--local-steps", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", parents=[common], help="train on a synthetic cohort")
    p.add_argument("--algo", choices=("fedsgd", "fedavg"), default="fedsgd")
    p.add_argument("--clients", type=_positive_int, default=4)
    p.add_argument("--steps", type=_positive_int, default=200)
    p.add_argument("--lr", type=_nonnegative_float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=_positive_int, default=10)
    p.add_argument("--noise", type=_nonnegative_float, default=0.0)
    p.add_argument("--local-steps", type=_positive_int, default=1, help="fedavg only")
    p.add_argument("--threshold", type=_nonnegative_float, default=1e-3)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _Usage as e:
        parser.exit(2, f"{parser.prog}: error: {e}\n")
    except FedgraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
