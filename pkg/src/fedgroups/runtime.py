"""Round-based execution of federated groups.

Every node runs one session loop (:class:`FedNode`) that owns its receive
queue. Envelopes tagged with a group the node leads go to that group's hub
inbox; everything else is handled in the member role. A node that leads a
group and receives a global model from its own leader acts as a mid-level
hub: it runs its group's round and forwards the aggregate upward, weighted by
the group's total weight. Rounds are synchronous with a straggler deadline.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .data import Dataset, NonFiniteLoss, TrainerConfig, TrainResult, flip_labels, local_train
from .fedopt import (
    AggregationRule,
    ControlState,
    PipelineConfig,
    aggregate,
    apply_server_update,
    client_variate_update,
    sync_control_state,
)
from .params import ParamVector, WeightedModel, axpy, check_same_shape, l2_distance, subtract, zeros_like
from .seeding import derive_seed
from .topology import FederatedGroup
from .transport import Endpoint, Envelope, Kind, TransportError

log = logging.getLogger(__name__)

# How often a session loop checks for shutdown while its queue is idle.
_POLL_MS = 20


class RuntimeAbort(RuntimeError):
    pass


class InsufficientParticipants(RuntimeAbort):
    def __init__(self, message: str, report: RoundReport):
        super().__init__(message)
        self.report = report


class Role(enum.Enum):
    HUB = "hub"
    MEMBER = "member"


class Phase(enum.IntEnum):
    IDLE = 0
    DISTRIBUTING = 1
    LOCAL_TRAINING = 2
    COLLECTING = 3
    AGGREGATING = 4
    SYNCHRONIZING = 5
    DONE = 6


@dataclass
class SessionState:
    role: Role
    phase: Phase = Phase.IDLE
    round: int = 0
    expected: set[str] = field(default_factory=set)
    received: set[str] = field(default_factory=set)
    deadline_ms: int = 0

    def advance(self, phase: Phase, *, deadline_passed: bool = False) -> None:
        if phase == Phase.IDLE:
            if self.phase not in (Phase.IDLE, Phase.DONE):
                raise RuntimeError(f"cannot reset a session in {self.phase.name}")
        elif phase <= self.phase:
            raise RuntimeError(f"illegal transition {self.phase.name} -> {phase.name}")
        if phase == Phase.AGGREGATING and self.received != self.expected and not deadline_passed:
            raise RuntimeError("cannot aggregate before all updates arrive or the deadline passes")
        if not self.received <= self.expected:
            raise RuntimeError("received updates from unexpected senders")
        self.phase = phase

    def reset(self, round_num: int, expected: Iterable[str], deadline_ms: int) -> None:
        # A round that failed part-way leaves the phase behind; start clean.
        self.phase = Phase.IDLE
        self.round = round_num
        self.expected = set(expected)
        self.received = set()
        self.deadline_ms = deadline_ms


@dataclass(frozen=True)
class RoundPlan:
    total_rounds: int = 1
    clients_per_round: int | float = 1.0
    sampling_seed: int = 0
    straggler_timeout_ms: int = 30_000
    min_participants: int = 1

    def __post_init__(self):
        c = self.clients_per_round
        if isinstance(c, float) and not 0.0 < c <= 1.0:
            raise ValueError(f"fractional clients_per_round must lie in (0, 1], got {c}")
        if isinstance(c, int) and c < 1:
            raise ValueError(f"clients_per_round must be >= 1, got {c}")
        if self.min_participants < 1:
            raise ValueError("min_participants must be >= 1")
        if isinstance(c, int) and self.min_participants > c:
            raise ValueError("min_participants cannot exceed clients_per_round")
        if self.total_rounds < 0 or self.straggler_timeout_ms < 0:
            raise ValueError("total_rounds and straggler_timeout_ms must be non-negative")

    def sample_size(self, group_size: int) -> int:
        c = self.clients_per_round
        if isinstance(c, float):
            return min(group_size, max(1, int(round(c * group_size))))
        return min(group_size, c)


def sample_participants(members: Sequence[str], plan: RoundPlan, round_num: int) -> list[str]:
    """Uniform sample without replacement, fixed by ``(sampling_seed, round)``."""
    if not members:
        raise ValueError("cannot sample from an empty group")
    pool = sorted(members)
    k = plan.sample_size(len(pool))
    if k == len(pool):
        return pool
    rng = np.random.default_rng(derive_seed(plan.sampling_seed, "sample", round_num))
    picked = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in picked)


@dataclass
class RoundReport:
    round: int
    group: int
    sampled: list[str] = field(default_factory=list)
    participants: list[str] = field(default_factory=list)
    stragglers: list[str] = field(default_factory=list)
    aggregate_weight: float = 0.0
    agg_ms: float = 0.0
    global_l2_delta: float = 0.0
    stale_dropped: int = 0
    aborted: bool = False

    def to_record(self, stable: bool = False) -> dict:
        rec = {
            "round": self.round,
            "group": self.group,
            "participants": self.participants,
            "stragglers": self.stragglers,
            "agg_ms": round(self.agg_ms, 3),
            "global_l2_delta": self.global_l2_delta,
        }
        if stable:
            del rec["agg_ms"]
        return rec


# -- members ------------------------------------------------------------------


class Learner(Protocol):
    lr: float

    def train(
        self,
        global_params: ParamVector,
        round_num: int,
        anchor: tuple[ParamVector, float] | None = None,
        correction: tuple[ParamVector, ParamVector] | None = None,
    ) -> TrainResult: ...


def round_seed(trainer_seed: int, node_id: str, round_num: int) -> int:
    """Seed a member uses for its local training in ``round_num``."""
    return derive_seed(trainer_seed, "train", node_id, round_num)


@dataclass(frozen=True)
class Attack:
    """Model poisoning: optionally train on flipped labels, then send
    ``global + boost * (local - global)``."""

    boost: float = 1e6
    flip_labels: bool = True


class ShardLearner:
    """Trains on a private shard with :func:`local_train`."""

    def __init__(self, node_id: str, shard: Dataset, cfg: TrainerConfig, attack: Attack | None = None):
        self.node_id = node_id
        self.cfg = cfg
        self.attack = attack
        self.shard = flip_labels(shard) if attack and attack.flip_labels else shard

    @property
    def lr(self) -> float:
        return self.cfg.lr

    def train(self, global_params, round_num, anchor=None, correction=None) -> TrainResult:
        res = local_train(
            global_params,
            self.shard,
            self.cfg,
            anchor=anchor,
            correction=correction,
            seed=round_seed(self.cfg.seed, self.node_id, round_num),
        )
        if self.attack is not None and self.attack.boost != 1.0:
            boosted = axpy(self.attack.boost, subtract(res.params, global_params), global_params)
            res = res._replace(params=boosted)
        return res


# -- hubs ---------------------------------------------------------------------


def _hyper_aux(round_num: int, mu: float, accumulate: bool, state_sync: bool) -> dict[str, str]:
    return {
        "round": str(round_num),
        "mu": repr(float(mu)),
        "accumulate": "1" if accumulate else "0",
        "state_sync": "1" if state_sync else "0",
    }


@dataclass
class _Collected:
    aggregate: ParamVector
    weight: float
    variates: dict[str, ParamVector]
    report: RoundReport


class GroupHub:
    """Aggregator side of one federated group."""

    def __init__(self, group: FederatedGroup, node: FedNode, cfg: PipelineConfig, plan: RoundPlan):
        self.group = group
        self.node = node
        self.cfg = cfg
        self.plan = plan
        self.control: ControlState | None = None
        self.state = SessionState(Role.HUB)
        self.inbox: queue.Queue = queue.Queue()

    def _send(self, to: str, env: Envelope) -> bool:
        try:
            self.node.endpoint.send(to, env)
            return True
        except TransportError as exc:
            log.warning("group %d: cannot reach %s: %s", self.group.group_id, to, exc)
            return False

    def collect(
        self,
        global_params: ParamVector,
        round_num: int,
        aux: Mapping[str, str] | None = None,
        server_variate: ParamVector | None = None,
    ) -> _Collected:
        """Distribute, wait for updates and aggregate. No server update."""
        gid = self.group.group_id
        aux = dict(aux) if aux is not None else _hyper_aux(
            round_num, self.cfg.penalty_mu, self.cfg.accumulate_gradients, self.cfg.state_sync
        )
        aux["round"] = str(round_num)
        sync = aux.get("state_sync") == "1"
        if sync and server_variate is None:
            if self.control is None:
                self.control = ControlState.zeros(global_params, self.group.members)
            server_variate = self.control.server_variate

        sampled = sample_participants(self.group.members, self.plan, round_num)
        report = RoundReport(round=round_num, group=gid, sampled=sampled)
        timeout = self.plan.straggler_timeout_ms
        self.state.reset(round_num, sampled, timeout)
        self.state.advance(Phase.DISTRIBUTING)

        failed: set[str] = set()
        for m in sampled:
            ok = True
            if sync:
                ok = self._send(m, Envelope(Kind.CONTROL_VARIATE, round_num, self.node.node_id, gid, server_variate))
            if ok:
                ok = self._send(m, Envelope(Kind.GLOBAL_MODEL, round_num, self.node.node_id, gid, global_params, aux))
            if not ok:
                failed.add(m)

        self.state.advance(Phase.COLLECTING)
        updates: dict[str, tuple[ParamVector, float]] = {}
        variates: dict[str, ParamVector] = {}
        pending = set(sampled)

        def complete(m):
            return m in updates and (not sync or m in variates)

        deadline = time.monotonic() + timeout / 1000.0
        while any(not complete(m) and m not in failed for m in sampled):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                env = self.inbox.get(timeout=remaining)
            except queue.Empty:
                break
            if env.round != round_num or env.sender not in pending:
                report.stale_dropped += 1
                continue
            if env.kind == Kind.MODEL_UPDATE:
                try:
                    check_same_shape(env.params, global_params)
                    weight = float(env.aux.get("num_samples", "1"))
                except (ValueError, TypeError) as exc:
                    log.warning("group %d: bad update from %s: %s", gid, env.sender, exc)
                    failed.add(env.sender)
                    continue
                updates[env.sender] = (env.params, weight)
            elif env.kind == Kind.CONTROL_VARIATE:
                variates[env.sender] = env.params
            elif env.kind == Kind.ABORT:
                failed.add(env.sender)
            if complete(env.sender):
                self.state.received.add(env.sender)

        participants = sorted(m for m in sampled if complete(m) and m not in failed)
        report.participants = participants
        report.stragglers = sorted(set(sampled) - set(participants))
        self.state.received = set(participants)
        need = min(self.plan.min_participants, len(sampled))
        if len(participants) < need:
            report.aborted = True
            self.state.phase = Phase.DONE
            raise InsufficientParticipants(
                f"group {gid} round {round_num}: {len(participants)} of {need} required participants arrived",
                report,
            )

        self.state.advance(Phase.AGGREGATING, deadline_passed=True)
        t0 = time.perf_counter()
        contribs = [WeightedModel(updates[m][0], updates[m][1], round_num, m) for m in participants]
        agg = aggregate(self.cfg.aggregation, contribs)
        report.agg_ms = (time.perf_counter() - t0) * 1000.0
        report.aggregate_weight = float(sum(c.weight for c in contribs))
        return _Collected(agg, report.aggregate_weight, {m: variates[m] for m in participants if m in variates}, report)

    def run_round(self, global_params: ParamVector, round_num: int) -> tuple[ParamVector, RoundReport]:
        got = self.collect(global_params, round_num)
        t0 = time.perf_counter()
        new_global = apply_server_update(global_params, got.aggregate, self.cfg)
        got.report.agg_ms += (time.perf_counter() - t0) * 1000.0
        self.state.advance(Phase.SYNCHRONIZING)
        if self.cfg.state_sync:
            self.control = sync_control_state(self.control, got.report.participants, got.variates)
        self.state.advance(Phase.DONE)
        got.report.global_l2_delta = l2_distance(new_global, global_params)
        return new_global, got.report


# -- nodes --------------------------------------------------------------------


class FedNode:
    """One node's session loop."""

    def __init__(
        self,
        node_id: str,
        endpoint: Endpoint,
        groups: Iterable[FederatedGroup] = (),
        learner: Learner | None = None,
        cfg: PipelineConfig | None = None,
        plan: RoundPlan | None = None,
    ):
        self.node_id = node_id
        self.endpoint = endpoint
        self.learner = learner
        self.cfg = cfg or PipelineConfig()
        self.plan = plan or RoundPlan()
        self.hubs = {g.group_id: GroupHub(g, self, self.cfg, self.plan) for g in groups if g.hub == node_id}
        self.events: queue.Queue = queue.Queue()
        self.left = threading.Event()
        self._server_variates: dict[tuple[int, int], ParamVector] = {}
        self._client_variates: dict[int, ParamVector] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._worker = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"node-{node_id}")

    @property
    def directed_hub(self) -> GroupHub | None:
        hubs = [h for h in self.hubs.values() if not h.group.undirected]
        return hubs[0] if hubs else None

    def start(self) -> FedNode:
        self._thread = threading.Thread(target=self._loop, name=f"session-{self.node_id}", daemon=True)
        self._thread.start()
        return self

    def request_stop(self) -> None:
        self._stop.set()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._worker.shutdown(wait=True)
        self.endpoint.close()

    def _loop(self) -> None:
        while not self._stop.is_set():
            env = self.endpoint.recv(timeout_ms=_POLL_MS)
            if env is not None:
                self._dispatch(env)

    def _dispatch(self, env: Envelope) -> None:
        if env.group_id in self.hubs and env.kind in (Kind.MODEL_UPDATE, Kind.CONTROL_VARIATE, Kind.ABORT):
            self.hubs[env.group_id].inbox.put(env)
        elif env.kind == Kind.GLOBAL_MODEL:
            self._worker.submit(self._on_global, env)
        elif env.kind == Kind.CONTROL_VARIATE:
            self._server_variates[(env.group_id, env.round)] = env.params
        else:
            if env.kind == Kind.LEAVE:
                self.left.set()
            self.events.put(env)

    def _reply(self, leader: str, env: Envelope) -> None:
        try:
            self.endpoint.send(leader, env)
        except TransportError as exc:
            log.warning("%s: reply to %s failed: %s", self.node_id, leader, exc)

    def _on_global(self, env: Envelope) -> None:
        try:
            self._handle_global(env)
        except Exception:  # the loop must survive a bad round
            log.exception("%s: round %d failed", self.node_id, env.round)
            self._reply(env.sender, Envelope(Kind.ABORT, env.round, self.node_id, env.group_id))

    def _handle_global(self, env: Envelope) -> None:
        gid, rnd, leader = env.group_id, env.round, env.sender
        sync = env.aux.get("state_sync") == "1"
        accumulate = env.aux.get("accumulate") == "1"
        mu = float(env.aux.get("mu", "0"))
        server_variate = self._server_variates.pop((gid, rnd), None) if sync else None
        if sync and server_variate is None:
            raise RuntimeAbort("state sync requested but no server variate arrived")
        t0 = time.perf_counter()

        hub = self.directed_hub
        if hub is not None:
            try:
                got = hub.collect(env.params, rnd, aux=env.aux, server_variate=server_variate)
            except InsufficientParticipants as exc:
                log.warning("%s: %s", self.node_id, exc)
                self._reply(leader, Envelope(Kind.ABORT, rnd, self.node_id, gid))
                return
            hub.state.advance(Phase.DONE)
            aux = {"round": str(rnd), "num_samples": repr(got.weight), "wall_ms": f"{(time.perf_counter() - t0) * 1000:.3f}"}
            self._reply(leader, Envelope(Kind.MODEL_UPDATE, rnd, self.node_id, gid, got.aggregate, aux))
            if sync:
                mean_variate = aggregate(
                    AggregationRule("equal_mean"),
                    [WeightedModel(v, 1.0, rnd, m) for m, v in got.variates.items()],
                )
                self._reply(leader, Envelope(Kind.CONTROL_VARIATE, rnd, self.node_id, gid, mean_variate))
            return

        if self.learner is None:
            return
        global_params = env.params
        client_variate = self._client_variates.get(gid)
        if sync and client_variate is None:
            client_variate = zeros_like(global_params)
        try:
            res = self.learner.train(
                global_params,
                rnd,
                anchor=(global_params, mu) if mu > 0 else None,
                correction=(client_variate, server_variate) if sync else None,
            )
        except NonFiniteLoss as exc:
            log.warning("%s: local training diverged: %s", self.node_id, exc)
            self._reply(leader, Envelope(Kind.ABORT, rnd, self.node_id, gid))
            return
        update = subtract(res.params, global_params) if accumulate else res.params
        aux = {
            "round": str(rnd),
            "num_samples": repr(float(res.num_samples)),
            "loss": repr(float(res.loss)),
            "wall_ms": f"{(time.perf_counter() - t0) * 1000:.3f}",
        }
        self._reply(leader, Envelope(Kind.MODEL_UPDATE, rnd, self.node_id, gid, update, aux))
        if sync:
            new_variate = client_variate_update(
                client_variate, server_variate, global_params, res.params, res.steps, self.learner.lr
            )
            self._client_variates[gid] = new_variate
            self._reply(leader, Envelope(Kind.CONTROL_VARIATE, rnd, self.node_id, gid, new_variate))


# -- federations --------------------------------------------------------------


class Federation:
    """Session loops for a set of groups on one transport.

    ``hosted`` restricts which nodes run in this process; in distributed mode
    each process hosts a single node.
    """

    def __init__(
        self,
        groups: Sequence[FederatedGroup],
        transport,
        learners: Mapping[str, Learner] | None = None,
        cfg: PipelineConfig | None = None,
        plan: RoundPlan | None = None,
        hosted: Iterable[str] | None = None,
    ):
        self.groups = [g for g in groups if not g.undirected]
        self.cfg = cfg or PipelineConfig()
        self.plan = plan or RoundPlan()
        learners = dict(learners or {})
        roots = sorted({g.hub for g in self.groups} - {m for g in self.groups for m in g.members})
        if len(roots) != 1:
            raise ValueError(f"a hierarchy needs exactly one root hub, found {roots}")
        self.root = roots[0]
        all_nodes = sorted({g.hub for g in self.groups} | {m for g in self.groups for m in g.members})
        self.node_ids = all_nodes
        hosted = all_nodes if hosted is None else sorted(hosted)
        unknown = set(hosted) - set(all_nodes)
        if unknown:
            raise ValueError(f"cannot host nodes outside the topology: {sorted(unknown)}")
        self.nodes: dict[str, FedNode] = {}
        for nid in hosted:
            self.nodes[nid] = FedNode(nid, transport.endpoint(nid), self.groups, learners.get(nid), self.cfg, self.plan)

    def __enter__(self) -> Federation:
        for node in self.nodes.values():
            node.start()
        return self

    def __exit__(self, *exc) -> None:
        # Signal every loop first so their poll timeouts overlap.
        for node in self.nodes.values():
            node.request_stop()
        for node in self.nodes.values():
            node.stop()

    @property
    def root_hub(self) -> GroupHub:
        return self.nodes[self.root].directed_hub

    def run_round(self, global_params: ParamVector, round_num: int) -> tuple[ParamVector, RoundReport]:
        return self.root_hub.run_round(global_params, round_num)

    def wait_for_joins(self, timeout_ms: int = 60_000) -> None:
        """Block until every non-hosted node has sent JOIN to the root."""
        missing = set(self.node_ids) - set(self.nodes)
        deadline = time.monotonic() + timeout_ms / 1000.0
        events = self.nodes[self.root].events
        while missing:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RuntimeAbort(f"nodes never joined: {sorted(missing)}")
            try:
                env = events.get(timeout=remaining)
            except queue.Empty:
                continue
            if env.kind == Kind.JOIN:
                missing.discard(env.sender)

    def dismiss(self, round_num: int = 0) -> None:
        """Send LEAVE to every node not hosted here."""
        root = self.nodes[self.root]
        for nid in self.node_ids:
            if nid not in self.nodes:
                root._reply(nid, Envelope(Kind.LEAVE, round_num, self.root))


def run_group_round(
    group: FederatedGroup,
    global_params: ParamVector,
    cfg: PipelineConfig,
    plan: RoundPlan,
    transport,
    learners: Mapping[str, Learner],
    round_num: int = 0,
) -> tuple[ParamVector, RoundReport]:
    """One round of a single star group with fresh session loops."""
    with Federation([group], transport, learners, cfg, plan) as fed:
        return fed.run_round(global_params, round_num)


def run_hierarchy(
    groups: Sequence[FederatedGroup],
    rounds: int,
    cfg: PipelineConfig,
    plan: RoundPlan,
    transport,
    learners: Mapping[str, Learner],
    initial: ParamVector,
    on_round=None,
) -> ParamVector:
    """Run ``rounds`` global rounds over a tree of groups.

    Mid-level hubs finish their own group before answering the root, so
    groups complete deepest first. ``on_round(round, global, report)`` is
    called after every successful round; an aborted round leaves the global
    model untouched and is reported with ``aborted=True``.
    """
    global_params = initial
    with Federation(groups, transport, learners, cfg, plan) as fed:
        for r in range(rounds):
            try:
                global_params, report = fed.run_round(global_params, r)
            except InsufficientParticipants as exc:
                report = exc.report
            if on_round is not None:
                on_round(r, global_params, report)
    return global_params


def run_decentralized_round(
    groups: Sequence[FederatedGroup],
    models: Mapping[str, ParamVector],
    cfg: PipelineConfig | None = None,
    transport=None,
    round_num: int = 0,
) -> dict[str, ParamVector]:
    """One synchronous gossip step over undirected neighbourhood groups.

    Each hub's new model is the equal mean of its own round-start model and
    its neighbours'. With a transport, every neighbour model travels as a
    MODEL_UPDATE envelope; endpoints are opened and closed per call.
    """
    neighbours = {g.hub: list(g.members) for g in groups}
    for hub, peers in neighbours.items():
        for n in (hub, *peers):
            if n not in models:
                raise KeyError(f"no model for node {n!r}")
            check_same_shape(models[hub], models[n])

    received: dict[str, dict[str, ParamVector]] = {h: {} for h in neighbours}
    if transport is None:
        for hub, peers in neighbours.items():
            received[hub] = {p: models[p] for p in peers}
    else:
        gid = {g.hub: g.group_id for g in groups}
        ids = sorted(set(neighbours) | {p for ps in neighbours.values() for p in ps})
        eps = {n: transport.endpoint(n) for n in ids}
        try:
            for hub in sorted(neighbours):
                for p in neighbours[hub]:
                    eps[p].send(hub, Envelope(Kind.MODEL_UPDATE, round_num, p, gid[hub], models[p]))
            for hub in sorted(neighbours):
                while len(received[hub]) < len(neighbours[hub]):
                    env = eps[hub].recv(timeout_ms=10_000)
                    if env is None:
                        raise RuntimeAbort(f"gossip round {round_num}: {hub} timed out")
                    if env.round == round_num and env.kind == Kind.MODEL_UPDATE:
                        received[hub][env.sender] = env.params
        finally:
            for ep in eps.values():
                ep.close()

    out = dict(models)
    for hub in neighbours:
        contribs = [WeightedModel(models[hub], 1.0, round_num, hub)]
        contribs += [WeightedModel(p, 1.0, round_num, s) for s, p in received[hub].items()]
        out[hub] = aggregate(AggregationRule("equal_mean"), contribs)
    return out
