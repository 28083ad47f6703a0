"""Experiment configuration files.

A config is a YAML document with the sections below. Unknown keys are
errors, and every error names the offending field path. Seeds left ``null``
are derived from the top-level ``seed`` as ``derive_seed(seed, name)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .data import MODELS, PARTITION_SCHEMES, TrainerConfig
from .fedopt import AGGREGATION_KINDS, AggregationRule, PipelineConfig
from .runtime import RoundPlan
from .seeding import derive_seed
from .topology import TopologyError, TopologyGraph, graph_from_dict, graph_to_dict, import_graph


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    n: int = 2000
    d: int = 2
    classes: int = 2
    separation: float = 6.0
    test_size: int = 500
    file: str | None = None
    test_file: str | None = None
    scheme: str = "iid"
    alpha: float = 0.5
    shards_per_client: int = 2
    seed: int | None = None


@dataclass(frozen=True)
class TransportConfig:
    kind: str = "inproc"
    connect_timeout_ms: int = 10_000


@dataclass(frozen=True)
class AttackConfig:
    clients: tuple[str, ...] = ()
    boost: float = 1e6
    flip_labels: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologyGraph
    topology_file: str | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    plan: RoundPlan = field(default_factory=RoundPlan)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    trainer_seed_explicit: bool = False
    sampling_seed_explicit: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    metrics: str | None = None
    seed: int = 0
    base_dir: str = "."

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def resolved_trainer(self) -> TrainerConfig:
        if self.trainer_seed_explicit:
            return self.trainer
        return replace(self.trainer, seed=self.sub_seed("trainer"))

    def resolved_plan(self) -> RoundPlan:
        if self.sampling_seed_explicit:
            return self.plan
        return replace(self.plan, sampling_seed=self.sub_seed("sampling"))

    def data_seed(self) -> int:
        return self.data.seed if self.data.seed is not None else self.sub_seed("data")

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path


# -- parsing ------------------------------------------------------------------


def _mapping(raw: Any, path: str, allowed: set[str]) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    for key in raw:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return raw


def _int(raw: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        else:
            raise ConfigError(path, f"expected an integer, got {raw!r}")
    if minimum is not None and raw < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {raw}")
    return raw


def _float(raw: Any, path: str) -> float:
    # PyYAML reads "1e6" as a string, so numeric strings are accepted too.
    if isinstance(raw, bool):
        raise ConfigError(path, f"expected a number, got {raw!r}")
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a number, got {raw!r}") from None


def _bool(raw: Any, path: str) -> bool:
    if not isinstance(raw, bool):
        raise ConfigError(path, f"expected true/false, got {raw!r}")
    return raw


def _str(raw: Any, path: str) -> str:
    if not isinstance(raw, str):
        raise ConfigError(path, f"expected a string, got {raw!r}")
    return raw


def _build(path: str, ctor, **kwargs):
    try:
        return ctor(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _parse_topology(raw: Any, base_dir: Path) -> tuple[TopologyGraph, str | None]:
    if raw is None:
        raise ConfigError("topology", "missing")
    if isinstance(raw, str):
        raw = {"file": raw}
    _mapping(raw, "topology", {"file", "nodes", "directed", "undirected"})
    if "file" in raw:
        if set(raw) != {"file"}:
            raise ConfigError("topology.file", "cannot be combined with inline nodes/edges")
        ref = _str(raw["file"], "topology.file")
        path = Path(ref) if Path(ref).is_absolute() else base_dir / ref
        try:
            return import_graph(path.read_text()), ref
        except OSError as exc:
            raise ConfigError("topology.file", f"cannot read {path}: {exc}") from None
        except (TopologyError, ValueError, KeyError) as exc:
            raise ConfigError("topology.file", str(exc)) from None
    try:
        return graph_from_dict(raw), None
    except (TopologyError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("topology", str(exc)) from None


def _parse_pipeline(raw: Any) -> PipelineConfig:
    raw = _mapping(raw, "pipeline", {"aggregation", "trim_ratio", "accumulate_gradients", "penalty_mu", "state_sync", "server_lr"})
    kind = _str(raw.get("aggregation", "weighted_mean"), "pipeline.aggregation")
    if kind not in AGGREGATION_KINDS:
        raise ConfigError("pipeline.aggregation", f"must be one of {', '.join(AGGREGATION_KINDS)}")
    rule = _build(
        "pipeline.trim_ratio", AggregationRule, kind=kind, trim_ratio=_float(raw.get("trim_ratio", 0.0), "pipeline.trim_ratio")
    )
    return _build(
        "pipeline",
        PipelineConfig,
        aggregation=rule,
        accumulate_gradients=_bool(raw.get("accumulate_gradients", False), "pipeline.accumulate_gradients"),
        penalty_mu=_float(raw.get("penalty_mu", 0.0), "pipeline.penalty_mu"),
        state_sync=_bool(raw.get("state_sync", False), "pipeline.state_sync"),
        server_lr=_float(raw.get("server_lr", 1.0), "pipeline.server_lr"),
    )


def _parse_plan(raw: Any) -> tuple[RoundPlan, bool]:
    raw = _mapping(
        raw, "plan", {"total_rounds", "clients_per_round", "sampling_seed", "straggler_timeout_ms", "min_participants"}
    )
    cpr = raw.get("clients_per_round", 1.0)
    if isinstance(cpr, bool) or not isinstance(cpr, (int, float)):
        raise ConfigError("plan.clients_per_round", f"expected an integer or a fraction, got {cpr!r}")
    seed = raw.get("sampling_seed")
    plan = _build(
        "plan",
        RoundPlan,
        total_rounds=_int(raw.get("total_rounds", 1), "plan.total_rounds", 0),
        clients_per_round=cpr,
        sampling_seed=0 if seed is None else _int(seed, "plan.sampling_seed", 0),
        straggler_timeout_ms=_int(raw.get("straggler_timeout_ms", 30_000), "plan.straggler_timeout_ms", 0),
        min_participants=_int(raw.get("min_participants", 1), "plan.min_participants", 1),
    )
    return plan, seed is not None


def _parse_trainer(raw: Any) -> tuple[TrainerConfig, bool]:
    raw = _mapping(
        raw,
        "trainer",
        {"model", "hidden", "local_epochs", "batch_size", "lr", "early_stop_patience", "l2", "seed", "augment_sigma"},
    )
    model = _str(raw.get("model", "logreg"), "trainer.model")
    if model not in MODELS:
        raise ConfigError("trainer.model", f"must be one of {', '.join(MODELS)}")
    patience = raw.get("early_stop_patience")
    seed = raw.get("seed")
    cfg = _build(
        "trainer",
        TrainerConfig,
        model=model,
        hidden=_int(raw.get("hidden", 16), "trainer.hidden", 1),
        local_epochs=_int(raw.get("local_epochs", 1), "trainer.local_epochs", 0),
        batch_size=_int(raw.get("batch_size", 32), "trainer.batch_size", 1),
        lr=_float(raw.get("lr", 0.1), "trainer.lr"),
        early_stop_patience=None if patience is None else _int(patience, "trainer.early_stop_patience", 1),
        l2=_float(raw.get("l2", 0.0), "trainer.l2"),
        seed=0 if seed is None else _int(seed, "trainer.seed", 0),
        augment_sigma=_float(raw.get("augment_sigma", 0.0), "trainer.augment_sigma"),
    )
    return cfg, seed is not None


def _parse_data(raw: Any) -> DataConfig:
    raw = _mapping(raw, "data", {"dataset", "partition"})
    ds = _mapping(raw.get("dataset"), "data.dataset", {"kind", "n", "d", "classes", "separation", "test_size", "file", "test_file", "seed"})
    part = _mapping(raw.get("partition"), "data.partition", {"scheme", "alpha", "shards_per_client"})
    kind = _str(ds.get("kind", "file" if "file" in ds else "blobs"), "data.dataset.kind")
    if kind not in ("blobs", "file"):
        raise ConfigError("data.dataset.kind", "must be blobs or file")
    if kind == "file" and "file" not in ds:
        raise ConfigError("data.dataset.file", "required when kind is file")
    scheme = _str(part.get("scheme", "iid"), "data.partition.scheme")
    if scheme not in PARTITION_SCHEMES:
        raise ConfigError("data.partition.scheme", f"must be one of {', '.join(PARTITION_SCHEMES)}")
    alpha = _float(part.get("alpha", 0.5), "data.partition.alpha")
    if not alpha > 0:
        raise ConfigError("data.partition.alpha", "must be positive")
    seed = ds.get("seed")
    n = _int(ds.get("n", 2000), "data.dataset.n", 1)
    classes = _int(ds.get("classes", 2), "data.dataset.classes", 1)
    if kind == "blobs" and n < classes:
        raise ConfigError("data.dataset.n", f"must be >= classes ({classes})")
    return DataConfig(
        n=n,
        d=_int(ds.get("d", 2), "data.dataset.d", 1),
        classes=classes,
        separation=_float(ds.get("separation", 6.0), "data.dataset.separation"),
        test_size=_int(ds.get("test_size", 500), "data.dataset.test_size", 1),
        file=_str(ds["file"], "data.dataset.file") if kind == "file" else None,
        test_file=_str(ds["test_file"], "data.dataset.test_file") if ds.get("test_file") is not None else None,
        scheme=scheme,
        alpha=alpha,
        shards_per_client=_int(part.get("shards_per_client", 2), "data.partition.shards_per_client", 1),
        seed=None if seed is None else _int(seed, "data.dataset.seed", 0),
    )


def _parse_transport(raw: Any) -> TransportConfig:
    if isinstance(raw, str):
        raw = {"kind": raw}
    raw = _mapping(raw, "transport", {"kind", "connect_timeout_ms"})
    kind = _str(raw.get("kind", "inproc"), "transport.kind")
    if kind not in ("inproc", "tcp"):
        raise ConfigError("transport.kind", "must be inproc or tcp")
    return TransportConfig(kind, _int(raw.get("connect_timeout_ms", 10_000), "transport.connect_timeout_ms", 1))


def _parse_attack(raw: Any) -> AttackConfig:
    raw = _mapping(raw, "attack", {"clients", "boost", "flip_labels"})
    clients = raw.get("clients", [])
    if not isinstance(clients, list):
        raise ConfigError("attack.clients", "expected a list of node ids")
    return AttackConfig(
        clients=tuple(_str(c, f"attack.clients[{i}]") for i, c in enumerate(clients)),
        boost=_float(raw.get("boost", 1e6), "attack.boost"),
        flip_labels=_bool(raw.get("flip_labels", True), "attack.flip_labels"),
    )


def config_from_dict(raw: Any, base_dir: str | Path = ".") -> ExperimentConfig:
    raw = _mapping(raw, "", {"seed", "topology", "pipeline", "plan", "trainer", "data", "transport", "attack", "output"})
    base = Path(base_dir)
    topology, topo_file = _parse_topology(raw.get("topology"), base)
    plan, sampling_explicit = _parse_plan(raw.get("plan"))
    trainer, trainer_explicit = _parse_trainer(raw.get("trainer"))
    out = _mapping(raw.get("output"), "output", {"metrics"})
    cfg = ExperimentConfig(
        topology=topology,
        topology_file=topo_file,
        pipeline=_parse_pipeline(raw.get("pipeline")),
        plan=plan,
        trainer=trainer,
        trainer_seed_explicit=trainer_explicit,
        sampling_seed_explicit=sampling_explicit,
        data=_parse_data(raw.get("data")),
        transport=_parse_transport(raw.get("transport")),
        attack=_parse_attack(raw.get("attack")),
        metrics=_str(out["metrics"], "output.metrics") if out.get("metrics") is not None else None,
        seed=_int(raw.get("seed", 0), "seed", 0),
        base_dir=str(base),
    )
    for i, c in enumerate(cfg.attack.clients):
        if c not in topology.nodes:
            raise ConfigError(f"attack.clients[{i}]", f"unknown node {c!r}")
    return cfg


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None
    return config_from_dict(raw, base_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical form: every field spelled out, defaults included."""
    d = cfg.data
    dataset = {"kind": "file" if d.file else "blobs", "seed": d.seed}
    if d.file:
        dataset.update(file=d.file, test_file=d.test_file)
    else:
        dataset.update(n=d.n, d=d.d, classes=d.classes, separation=d.separation, test_size=d.test_size)
    p, t, pl = cfg.pipeline, cfg.trainer, cfg.plan
    return {
        "seed": cfg.seed,
        "topology": {"file": cfg.topology_file} if cfg.topology_file else graph_to_dict(cfg.topology),
        "pipeline": {
            "aggregation": p.aggregation.kind,
            "trim_ratio": p.aggregation.trim_ratio,
            "accumulate_gradients": p.accumulate_gradients,
            "penalty_mu": p.penalty_mu,
            "state_sync": p.state_sync,
            "server_lr": p.server_lr,
        },
        "plan": {
            "total_rounds": pl.total_rounds,
            "clients_per_round": pl.clients_per_round,
            "sampling_seed": pl.sampling_seed if cfg.sampling_seed_explicit else None,
            "straggler_timeout_ms": pl.straggler_timeout_ms,
            "min_participants": pl.min_participants,
        },
        "trainer": {
            "model": t.model,
            "hidden": t.hidden,
            "local_epochs": t.local_epochs,
            "batch_size": t.batch_size,
            "lr": t.lr,
            "early_stop_patience": t.early_stop_patience,
            "l2": t.l2,
            "seed": t.seed if cfg.trainer_seed_explicit else None,
            "augment_sigma": t.augment_sigma,
        },
        "data": {
            "dataset": dataset,
            "partition": {"scheme": d.scheme, "alpha": d.alpha, "shards_per_client": d.shards_per_client},
        },
        "transport": {"kind": cfg.transport.kind, "connect_timeout_ms": cfg.transport.connect_timeout_ms},
        "attack": {"clients": list(cfg.attack.clients), "boost": cfg.attack.boost, "flip_labels": cfg.attack.flip_labels},
        "output": {"metrics": cfg.metrics},
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
