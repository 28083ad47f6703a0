"""Run a configured federation end to end and write JSONL metrics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import Dataset, PartitionSpec, evaluate, init_params, load_dataset, make_blobs, partition
from .fedopt import AggregationRule, aggregate
from .params import ParamVector, WeightedModel
from .seeding import derive_seed
from .runtime import Attack, Federation, InsufficientParticipants, ShardLearner, run_decentralized_round
from .topology import CyclicLeadership, FederatedGroup, decompose
from .transport import Envelope, InProcTransport, Kind, TcpTransport, loopback_addresses

log = logging.getLogger(__name__)


@dataclass
class ExitReport:
    exit_code: int
    rounds_completed: int = 0
    final_accuracy: float | None = None
    final_loss: float | None = None
    final_params: ParamVector | None = None
    records: list[dict] = field(default_factory=list)

    def rounds_to_accuracy(self, target: float) -> int | None:
        """First 1-based round whose global accuracy reached ``target``."""
        for rec in self.records:
            if rec.get("type") == "round" and rec.get("accuracy") is not None and rec["accuracy"] >= target:
                return rec["round"] + 1
        return None


@dataclass
class Setup:
    groups: list[FederatedGroup]
    clients: list[str]
    train: Dataset
    test: Dataset
    partition: PartitionSpec
    learners: dict[str, ShardLearner]
    initial: ParamVector
    decentralized: bool


def datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.file:
        train = load_dataset(cfg.resolve_path(d.file))
        test = load_dataset(cfg.resolve_path(d.test_file)) if d.test_file else train
        return train, test
    seed = cfg.data_seed()
    train = make_blobs(d.n, d.d, d.classes, d.separation, seed)
    test = make_blobs(d.test_size, d.d, d.classes, d.separation, derive_seed(seed, "test"))
    return train, test


def client_nodes(groups: list[FederatedGroup]) -> list[str]:
    """Nodes that train: members that lead no directed group, or gossip peers."""
    directed = [g for g in groups if not g.undirected]
    if directed:
        hubs = {g.hub for g in directed}
        return sorted({m for g in directed for m in g.members} - hubs)
    return sorted({g.hub for g in groups})


def build(cfg: ExperimentConfig) -> Setup:
    try:
        groups = decompose(cfg.topology)
    except CyclicLeadership as exc:
        raise ConfigError("topology", str(exc)) from None
    if not groups:
        raise ConfigError("topology", "no edges: nothing to federate")
    kinds = {g.undirected for g in groups}
    if len(kinds) > 1:
        raise ConfigError("topology", "mixed directed/undirected topologies cannot be run, only inspected")
    clients = client_nodes(groups)
    for i, c in enumerate(cfg.attack.clients):
        if c not in clients:
            raise ConfigError(f"attack.clients[{i}]", f"{c!r} does not train locally")

    train, test = datasets(cfg)
    d = cfg.data
    if len(train) < len(clients):
        raise ConfigError("data.dataset.n", f"{len(train)} examples cannot cover {len(clients)} clients")
    try:
        spec = partition(
            train, clients, d.scheme, cfg.sub_seed("partition"), alpha=d.alpha, shards_per_client=d.shards_per_client
        )
    except ValueError as exc:
        raise ConfigError("data.partition", str(exc)) from None
    trainer = cfg.resolved_trainer()
    attack = Attack(cfg.attack.boost, cfg.attack.flip_labels)
    learners = {
        c: ShardLearner(c, spec.shard(train, c), trainer, attack if c in cfg.attack.clients else None) for c in clients
    }
    initial = init_params(trainer, train.dim, train.num_classes, cfg.sub_seed("init"))
    return Setup(groups, clients, train, test, spec, learners, initial, kinds == {True})


def _transport(cfg: ExperimentConfig, node_ids):
    if cfg.transport.kind == "inproc":
        return InProcTransport()
    addresses = {n: cfg.topology.nodes[n].address for n in node_ids if cfg.topology.nodes[n].address}
    if len(addresses) < len(node_ids):
        fresh = loopback_addresses([n for n in node_ids if n not in addresses])
        addresses.update(fresh)
    return TcpTransport(addresses, cfg.transport.connect_timeout_ms)


class _Metrics:
    def __init__(self, path: Path | None, stable: bool):
        self.stable = stable
        self.records: list[dict] = []
        self._fh = open(path, "w") if path else None

    def write(self, rec: dict) -> None:
        if self.stable:
            rec = {k: v for k, v in rec.items() if k not in ("wall_ms", "agg_ms")}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def run_experiment(
    cfg: ExperimentConfig,
    *,
    node: str | None = None,
    stable_output: bool = False,
    metrics_path: str | Path | None = None,
) -> ExitReport:
    """Execute the federation described by ``cfg``.

    ``node`` selects distributed mode: only that node runs in this process and
    peers are reached over TCP at their configured addresses. The root node
    drives the rounds and writes metrics; other nodes serve until dismissed.
    """
    setup = build(cfg)
    path = metrics_path if metrics_path is not None else (cfg.resolve_path(cfg.metrics) if cfg.metrics else None)
    if node is not None:
        return _run_distributed_node(cfg, setup, node, stable_output, path)

    metrics = _Metrics(Path(path) if path else None, stable_output)
    try:
        if setup.decentralized:
            return _run_decentralized(cfg, setup, metrics)
        node_ids = sorted({g.hub for g in setup.groups} | {m for g in setup.groups for m in g.members})
        transport = _transport(cfg, node_ids)
        try:
            with Federation(setup.groups, transport, setup.learners, cfg.pipeline, cfg.resolved_plan()) as fed:
                return _drive(cfg, setup, fed, metrics)
        finally:
            transport.close()
    finally:
        metrics.close()


def _drive(cfg: ExperimentConfig, setup: Setup, fed: Federation, metrics: _Metrics) -> ExitReport:
    started = time.perf_counter()
    global_params = setup.initial
    completed = 0
    acc = loss = None
    for r in range(cfg.plan.total_rounds):
        t0 = time.perf_counter()
        try:
            global_params, report = fed.run_round(global_params, r)
            completed += 1
        except InsufficientParticipants as exc:
            log.warning("%s", exc)
            report = exc.report
        acc, loss = evaluate(global_params, setup.test)
        rec = {"type": "round", **report.to_record(), "accuracy": acc, "loss": loss, "aborted": report.aborted}
        rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        metrics.write(rec)
    if acc is None:
        acc, loss = evaluate(global_params, setup.test)
    metrics.write(
        {
            "type": "summary",
            "rounds": cfg.plan.total_rounds,
            "rounds_completed": completed,
            "final_accuracy": acc,
            "final_loss": loss,
            "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
        }
    )
    # Aborted rounds keep the global model and the run goes on, but the
    # failure still surfaces in the exit code once all metrics are written.
    code = 0 if completed == cfg.plan.total_rounds else 3
    return ExitReport(code, completed, acc, loss, global_params, metrics.records)


def _run_decentralized(cfg: ExperimentConfig, setup: Setup, metrics: _Metrics) -> ExitReport:
    started = time.perf_counter()
    models = {n: setup.initial for n in setup.clients}
    transport = _transport(cfg, setup.clients)
    acc = loss = None
    try:
        for r in range(cfg.plan.total_rounds):
            t0 = time.perf_counter()
            trained = {n: setup.learners[n].train(models[n], r).params for n in setup.clients}
            models = run_decentralized_round(setup.groups, trained, cfg.pipeline, transport, r)
            mean_model = aggregate(AggregationRule("equal_mean"), [WeightedModel(m, 1.0, r, n) for n, m in models.items()])
            accs = [evaluate(m, setup.test)[0] for m in models.values()]
            acc, loss = evaluate(mean_model, setup.test)
            metrics.write(
                {
                    "type": "round",
                    "round": r,
                    "participants": setup.clients,
                    "accuracy": acc,
                    "loss": loss,
                    "mean_node_accuracy": float(np.mean(accs)),
                    "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
                }
            )
    finally:
        transport.close()
    metrics.write(
        {
            "type": "summary",
            "rounds": cfg.plan.total_rounds,
            "rounds_completed": cfg.plan.total_rounds,
            "final_accuracy": acc,
            "final_loss": loss,
            "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
        }
    )
    final = aggregate(AggregationRule("equal_mean"), [WeightedModel(m, 1.0, 0, n) for n, m in models.items()])
    return ExitReport(0, cfg.plan.total_rounds, acc, loss, final, metrics.records)


def _run_distributed_node(cfg: ExperimentConfig, setup: Setup, node: str, stable: bool, path) -> ExitReport:
    if setup.decentralized:
        raise ConfigError("transport", "decentralized topologies run in a single process")
    if cfg.transport.kind != "tcp":
        raise ConfigError("transport.kind", "--node requires tcp transport")
    if node not in cfg.topology.nodes:
        raise ConfigError("", f"--node {node!r} is not in the topology")
    missing = [n for n in cfg.topology.nodes if not cfg.topology.nodes[n].address]
    if missing:
        raise ConfigError("topology.nodes", f"nodes need addresses in distributed mode: {missing}")
    transport = _transport(cfg, sorted(cfg.topology.nodes))
    try:
        fed = Federation(setup.groups, transport, setup.learners, cfg.pipeline, cfg.resolved_plan(), hosted=[node])
        with fed:
            if node == fed.root:
                fed.wait_for_joins()
                metrics = _Metrics(Path(path) if path else None, stable)
                try:
                    report = _drive(cfg, setup, fed, metrics)
                finally:
                    metrics.close()
                fed.dismiss(cfg.plan.total_rounds)
                return report
            me = fed.nodes[node]
            me.endpoint.send(fed.root, Envelope(Kind.JOIN, 0, node))
            me.left.wait()
            return ExitReport(0)
    finally:
        transport.close()
