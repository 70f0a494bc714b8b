"""Reference federated algorithms.

The shared scalar loss is a one-target linear regression,
loss(x, y) = 0.5 * (dot(x, y) - 1)^2, so a model x fits a datum y exactly
when their inner product is 1. federated_loss spreads it over a cohort:
broadcast the model, map the loss, take the federated mean.

fed_sgd_step differentiates that program and applies one server update.
fed_avg_round is written directly in the primitives (it is not the
gradient of anything): broadcast, a mapped body with the K local SGD
steps unrolled, then a mean over the client models.

synth_dataset builds cohorts whose optimum is known by construction: a
unit-norm x* with power-of-two coordinates, and data y = x* plus noise
orthogonal to x*, so <x*, y> == 1 holds exactly when noise is zero.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .autodiff import grad
from .errors import PlacementError, ShapeError
from .fedprims import federated_broadcast, federated_map, federated_mean
from .interp import eval_graph
from .ir import AbstractValue, Graph
from .placement import (
    Placement,
    PlacedTensor,
    ambient_client_count,
    client_count,
)
from .tensor import DEFAULT_DTYPE, Tensor, tensor
from .trace import TraceValue, dot, outer, trace


def loss_fn(x, y):
    """0.5 * (dot(x, y) - 1)^2; same code runs eagerly and under trace."""
    return 0.5 * ((dot(x, y) - 1.0) ** 2)


def _loss_program(model, data):
    model_bc = federated_broadcast(model)
    losses = federated_map(loss_fn, (model_bc, data))
    return federated_mean(losses)


def as_server_model(model) -> PlacedTensor:
    if isinstance(model, PlacedTensor):
        if model.placement is not Placement.SERVER:
            raise PlacementError(f"model must live at the server, got {model!r}")
        return model
    t = tensor(model)
    if t.ndim != 2 or t.shape[0] != 1:
        raise ShapeError(f"model needs shape (1, dim), got {t.shape}")
    return PlacedTensor(t, Placement.SERVER)


def _as_clients_data(data) -> PlacedTensor:
    if isinstance(data, PlacedTensor):
        if data.placement is not Placement.CLIENTS:
            raise PlacementError(f"cohort data must live at clients, got {data!r}")
        return data
    t = tensor(data)
    if t.ndim != 2:
        raise ShapeError(f"cohort data needs shape (n, dim), got {t.shape}")
    return PlacedTensor(t, Placement.CLIENTS)


def federated_loss(model, data):
    """Mean over clients of loss_fn(model, client datum); scalar at server."""
    if isinstance(model, TraceValue) or isinstance(data, TraceValue):
        return _loss_program(model, data)
    if isinstance(data, Cohort):
        data = PlacedTensor(data.pooled_features(), Placement.CLIENTS)
    model = as_server_model(model)
    data = _as_clients_data(data)
    if ambient_client_count() is None:
        with client_count(data.tensor.shape[0]):
            return _loss_program(model, data)
    return _loss_program(model, data)


@dataclass(frozen=True)
class OptState:
    """Plain SGD carries only its learning rate."""

    learning_rate: float

    def __post_init__(self):
        lr = float(self.learning_rate)
        # zero is allowed (a no-op step); negative would ascend
        if not np.isfinite(lr) or lr < 0.0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate!r}")
        object.__setattr__(self, "learning_rate", lr)


@dataclass(frozen=True)
class Cohort:
    """Per-client batches: features (n, batch, dim), targets (n, batch).

    The shared loss has a fixed unit target, so targets are ones in every
    generated cohort; they are carried so cohorts are self-describing.
    """

    features: Tensor
    targets: Tensor

    def __post_init__(self):
        f = tensor(self.features)
        t = tensor(self.targets)
        if f.ndim != 3:
            raise ShapeError(f"features need shape (n, batch, dim), got {f.shape}")
        if t.shape != f.shape[:2]:
            raise ShapeError(
                f"targets shape {t.shape} does not match clients/batch {f.shape[:2]}"
            )
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)

    @property
    def n_clients(self) -> int:
        return self.features.shape[0]

    @property
    def batch_size(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def pooled_features(self) -> Tensor:
        """(n * batch, dim): every example as its own virtual client."""
        n, b, d = self.features.shape
        return Tensor(self.features.numpy().reshape(n * b, d))

    def batch_columns(self) -> list[Tensor]:
        """One (n, dim) array per batch position, for unrolled local steps."""
        return [Tensor(self.features.numpy()[:, j, :]) for j in range(self.batch_size)]


def _cohort_features(cohort) -> Tensor:
    """Cohort or raw (n, dim) data, normalized for the pooled-gradient path."""
    if isinstance(cohort, Cohort):
        return cohort.pooled_features()
    return _as_clients_data(cohort).tensor


def _cohort_batches(cohort) -> list[Tensor]:
    if isinstance(cohort, Cohort):
        return cohort.batch_columns()
    return [_as_clients_data(cohort).tensor]


@functools.lru_cache(maxsize=None)
def loss_graph(n_clients: int, dim: int) -> Graph:
    """The traced federated loss for an (n, dim) cohort."""
    specs = (
        AbstractValue((1, dim), DEFAULT_DTYPE, Placement.SERVER),
        AbstractValue((n_clients, dim), DEFAULT_DTYPE, Placement.CLIENTS),
    )
    return trace(_loss_program, specs, n_clients)


@functools.lru_cache(maxsize=None)
def loss_grad_graph(n_clients: int, dim: int) -> Graph:
    """grad of the traced federated loss for an (n, dim) cohort."""
    return grad(loss_graph(n_clients, dim), wrt=0)


def fed_sgd_step(model, cohort, opt: OptState) -> tuple[PlacedTensor, OptState]:
    """One server SGD step on the gradient of the federated loss."""
    model = as_server_model(model)
    features = _cohort_features(cohort)
    if features.shape[1] != model.tensor.shape[1]:
        raise ShapeError(
            f"model dim {model.tensor.shape[1]} vs data dim {features.shape[1]}"
        )
    g = loss_grad_graph(features.shape[0], features.shape[1])
    (grad_out,) = eval_graph(
        g, [model, PlacedTensor(features, Placement.CLIENTS)], check=False
    )
    step = tc.scale(grad_out.tensor, opt.learning_rate)
    return PlacedTensor(tc.sub(model.tensor, step), Placement.SERVER), opt


@functools.lru_cache(maxsize=None)
def fed_avg_graph(n_clients: int, batch: int, dim: int, client_lr: float, local_steps: int) -> Graph:
    """One FedAvg round in primitives; local steps and batch are unrolled."""
    if local_steps < 1:
        raise ValueError(f"need at least one local step, got {local_steps}")
    if client_lr <= 0 or not np.isfinite(client_lr):
        raise ValueError(f"client learning rate must be positive, got {client_lr!r}")

    def local_sgd(model_slice, *batch_slices):
        w = model_slice
        for _ in range(local_steps):
            acc = None
            for y in batch_slices:
                residual = dot(w, y) - 1.0
                g = outer(residual, y)
                acc = g if acc is None else acc + g
            if batch > 1:
                acc = acc / float(batch)
            w = w - client_lr * acc
        return w

    def round_program(model, *batches):
        model_bc = federated_broadcast(model)
        client_models = federated_map(local_sgd, (model_bc, *batches))
        return federated_mean(client_models)

    specs = (AbstractValue((1, dim), DEFAULT_DTYPE, Placement.SERVER),) + tuple(
        AbstractValue((n_clients, dim), DEFAULT_DTYPE, Placement.CLIENTS)
        for _ in range(batch)
    )
    return trace(round_program, specs, n_clients)


def fed_avg_round(model, cohort, client_lr: float, local_steps: int) -> PlacedTensor:
    """Broadcast, K local SGD steps per client, mean of client models."""
    model = as_server_model(model)
    batches = _cohort_batches(cohort)
    dim = model.tensor.shape[1]
    for b in batches:
        if b.shape[1] != dim:
            raise ShapeError(f"model dim {dim} vs data dim {b.shape[1]}")
    n = batches[0].shape[0]
    g = fed_avg_graph(n, len(batches), dim, float(client_lr), int(local_steps))
    inputs = [model] + [PlacedTensor(b, Placement.CLIENTS) for b in batches]
    (new_model,) = eval_graph(g, inputs, check=False)
    return new_model


def synth_dataset(n_clients: int, batch_size: int, dim: int, seed: int, noise: float = 0.3) -> Cohort:
    """Deterministic cohort with a known optimum.

    x* has m = (largest power of four <= dim) nonzero entries of magnitude
    m**-0.5; m being a power of four makes that magnitude a power of two,
    so |x*| == 1 holds exactly in floats and the zero-noise cohort has
    federated_loss(x*) == 0.0 exactly.
    """
    if n_clients < 1 or batch_size < 1 or dim < 1:
        raise ValueError("cohort sizes must be positive")
    rng = np.random.default_rng(seed)
    x_star = _unit_optimum(dim, rng)
    z = rng.standard_normal((n_clients, batch_size, dim))
    # remove the x* component so noise never moves <x*, y> off 1 on average
    tangential = z - (z @ x_star)[..., None] * x_star
    features = x_star + float(noise) * tangential
    targets = np.ones((n_clients, batch_size))
    return Cohort(tensor(features), tensor(targets))


def _unit_optimum(dim: int, rng: np.random.Generator) -> np.ndarray:
    m = 1
    while m * 4 <= dim:
        m *= 4
    x_star = np.zeros(dim)
    positions = rng.choice(dim, size=m, replace=False)
    signs = rng.choice(np.array([-1.0, 1.0]), size=m)
    x_star[positions] = signs * m**-0.5
    return x_star


def optimum_of(dim: int, seed: int) -> Tensor:
    """The x* that synth_dataset(..., dim, seed) was built around, as (1, dim)."""
    return tensor(_unit_optimum(dim, np.random.default_rng(seed))[None, :])
