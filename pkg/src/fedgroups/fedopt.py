"""Federated optimizer pipeline.

A round at a hub runs four phases, each switchable on its own:

1. parameter aggregation (:func:`aggregate`, FedAvg family or a robust rule),
2. gradient accumulation (:func:`apply_server_update`, pseudo-gradient step),
3. parameter penalization (:func:`proximal_gradient`, used by local trainers),
4. state synchronization (:func:`corrected_gradient`, :func:`sync_control_state`).

Everything here is a pure function of immutable inputs.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .params import ParamVector, ShapeMismatch, WeightedModel, axpy, check_same_shape, subtract, zeros_like

AGGREGATION_KINDS = ("weighted_mean", "equal_mean", "coordinate_median", "trimmed_mean")


class EmptyUpdateSet(ValueError):
    pass


class ZeroTotalWeight(ValueError):
    pass


class UnknownClient(KeyError):
    pass


@dataclass(frozen=True)
class AggregationRule:
    kind: str = "weighted_mean"
    trim_ratio: float = 0.0

    def __post_init__(self):
        if self.kind not in AGGREGATION_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if not 0.0 <= self.trim_ratio < 0.5:
            raise ValueError(f"trim_ratio must lie in [0, 0.5), got {self.trim_ratio}")


@dataclass(frozen=True)
class PipelineConfig:
    aggregation: AggregationRule = field(default_factory=AggregationRule)
    accumulate_gradients: bool = False
    penalty_mu: float = 0.0
    state_sync: bool = False
    server_lr: float = 1.0

    def __post_init__(self):
        if not self.server_lr > 0:
            raise ValueError(f"server_lr must be positive, got {self.server_lr}")
        if not self.penalty_mu >= 0:
            raise ValueError(f"penalty_mu must be non-negative, got {self.penalty_mu}")


@dataclass(frozen=True)
class ControlState:
    server_variate: ParamVector
    client_variates: Mapping[str, ParamVector]

    @classmethod
    def zeros(cls, template: ParamVector, clients: Iterable[str]) -> ControlState:
        z = zeros_like(template)
        return cls(server_variate=z, client_variates={c: z for c in sorted(clients)})


def _stack(updates: Sequence[WeightedModel]) -> tuple[list[str], np.ndarray, list[int]]:
    """Flatten every update into one row of a (n, size) matrix."""
    ref = updates[0].params
    for u in updates[1:]:
        check_same_shape(ref, u.params)
    names = list(ref)
    sizes = [ref[n].size for n in names]
    rows = np.stack([u.params.flatten() for u in updates]) if names else np.zeros((len(updates), 0))
    return names, rows, sizes


def _unstack(names: list[str], sizes: list[int], flat: np.ndarray) -> ParamVector:
    out, start = {}, 0
    for name, size in zip(names, sizes):
        out[name] = flat[start:start + size].copy()
        start += size
    return ParamVector._trusted(out)


def _weighted_mean(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # Normalizing by the largest weight first makes equal weights of any
    # magnitude produce exactly the coefficients 1/n.
    top = weights.max()
    if not top > 0:
        raise ZeroTotalWeight("total aggregation weight is zero")
    rel = weights / top
    coef = rel / rel.sum()
    acc = np.zeros(rows.shape[1])
    for c, row in zip(coef, rows):
        acc += c * row
    # Rounding in sum(coef) can push a coordinate an ulp outside the hull.
    return np.clip(acc, rows.min(axis=0), rows.max(axis=0))


def aggregate(rule: AggregationRule | str, updates: Sequence[WeightedModel]) -> ParamVector:
    """Combine model contributions into one parameter vector.

    Updates are summed in sender-id order so results do not depend on
    arrival order.
    """
    if isinstance(rule, str):
        rule = AggregationRule(rule)
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    updates = sorted(updates, key=lambda u: u.sender)
    names, rows, sizes = _stack(updates)
    n = len(updates)

    if rule.kind == "weighted_mean":
        flat = _weighted_mean(rows, np.array([u.weight for u in updates], dtype=np.float64))
    elif rule.kind == "equal_mean":
        flat = _weighted_mean(rows, np.ones(n))
    elif rule.kind == "coordinate_median":
        flat = np.median(rows, axis=0)
    else:
        k = int(np.floor(rule.trim_ratio * n))
        if n - 2 * k < 1:
            raise EmptyUpdateSet(f"trimming {k} per side leaves nothing of {n} updates")
        ordered = np.sort(rows, axis=0)
        flat = np.clip(ordered[k:n - k].mean(axis=0), ordered[0], ordered[-1])
    return _unstack(names, sizes, flat)


def apply_server_update(global_params: ParamVector, aggregated: ParamVector, cfg: PipelineConfig) -> ParamVector:
    """Turn the aggregate into the next global model.

    With gradient accumulation the aggregate is a pseudo-gradient (mean client
    delta) applied with ``server_lr``; otherwise it replaces the model.
    """
    check_same_shape(global_params, aggregated)
    if cfg.accumulate_gradients:
        return axpy(cfg.server_lr, aggregated, global_params)
    return aggregated


def _add_nonzero(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Adding an exact zero must leave ``a`` bitwise intact, -0.0 included.
    return np.where(b == 0, a, a + b)


def proximal_gradient(local_grad: ParamVector, local: ParamVector, global_params: ParamVector, mu: float) -> ParamVector:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    check_same_shape(local_grad, local)
    check_same_shape(local, global_params)
    if mu == 0:
        return local_grad
    return ParamVector._trusted(
        {n: _add_nonzero(local_grad[n], mu * (local[n] - global_params[n])) for n in local_grad}
    )


def corrected_gradient(local_grad: ParamVector, client_variate: ParamVector, server_variate: ParamVector) -> ParamVector:
    check_same_shape(local_grad, client_variate)
    check_same_shape(local_grad, server_variate)
    # (sv - cv) first: equal variates then cancel exactly instead of rounding.
    return ParamVector._trusted(
        {n: _add_nonzero(local_grad[n], server_variate[n] - client_variate[n]) for n in local_grad}
    )


def client_variate_update(
    client_variate: ParamVector,
    server_variate: ParamVector,
    global_params: ParamVector,
    local_params: ParamVector,
    steps: int,
    lr: float,
) -> ParamVector:
    """New client control variate after ``steps`` local SGD steps of size ``lr``.

    ``c_i - c + (global - local) / (steps * lr)``; unchanged when no step ran.
    """
    if steps <= 0:
        return client_variate
    delta = subtract(global_params, local_params)
    k = 1.0 / (steps * lr)
    return ParamVector._trusted(
        {n: client_variate[n] - server_variate[n] + k * delta[n] for n in client_variate}
    )


def sync_control_state(
    state: ControlState,
    participating: Sequence[str],
    new_client_variates: Mapping[str, ParamVector],
) -> ControlState:
    """Replace participants' variates and move the server variate by
    ``|S|/|N|`` times the mean participant change."""
    if not participating:
        return state
    for cid in participating:
        if cid not in state.client_variates:
            raise UnknownClient(cid)
        if cid not in new_client_variates:
            raise UnknownClient(f"no new variate for {cid!r}")
        check_same_shape(state.client_variates[cid], new_client_variates[cid])
    ids = sorted(set(participating))
    deltas = [
        WeightedModel(subtract(new_client_variates[c], state.client_variates[c]), 1.0, sender=c)
        for c in ids
    ]
    mean_delta = aggregate(AggregationRule("equal_mean"), deltas)
    frac = len(ids) / len(state.client_variates)
    clients = dict(state.client_variates)
    for c in ids:
        clients[c] = new_client_variates[c]
    return ControlState(server_variate=axpy(frac, mean_delta, state.server_variate), client_variates=clients)


__all__ = [
    "AGGREGATION_KINDS",
    "AggregationRule",
    "ControlState",
    "EmptyUpdateSet",
    "PipelineConfig",
    "ShapeMismatch",
    "UnknownClient",
    "ZeroTotalWeight",
    "aggregate",
    "apply_server_update",
    "client_variate_update",
    "corrected_gradient",
    "proximal_gradient",
    "sync_control_state",
]
