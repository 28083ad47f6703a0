"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` or directly as a script.
"""

import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_graph, random_two_level_tree  # noqa: E402
from fedgroups.config import config_from_dict  # noqa: E402
from fedgroups.data import TrainResult, TrainerConfig, init_params, local_train, loss_and_grad, make_blobs  # noqa: E402
from fedgroups.experiment import run_experiment  # noqa: E402
from fedgroups.fedopt import (  # noqa: E402
    AggregationRule,
    ControlState,
    PipelineConfig,
    aggregate,
    corrected_gradient,
    proximal_gradient,
    sync_control_state,
)
from fedgroups.params import ParamVector, WeightedModel, l2_distance, zeros_like  # noqa: E402
from fedgroups.runtime import Federation, RoundPlan, ShardLearner, round_seed, run_decentralized_round, run_hierarchy  # noqa: E402
from fedgroups.topology import CyclicLeadership, TopologyGraph, decompose, induced_star  # noqa: E402
from fedgroups.transport import (  # noqa: E402
    BadMagic,
    ChecksumMismatch,
    Envelope,
    InProcTransport,
    Kind,
    Truncated,
    UnsupportedVersion,
    decode,
    encode,
)
from fedgroups.transport.codec import PARAM_KINDS  # noqa: E402

SEEDS = range(5)
RULES = [
    AggregationRule("weighted_mean"),
    AggregationRule("equal_mean"),
    AggregationRule("coordinate_median"),
    AggregationRule("trimmed_mean", 0.2),
]


def criterion(number: int, budget: float):
    """Time the wrapped check, enforce its budget and print one verdict line.

    The check returns a short detail string and raises on failure.
    """

    def wrap(check):
        def run(capsys):
            t0 = time.perf_counter()
            detail, error = "", None
            try:
                detail = check() or ""
                elapsed = time.perf_counter() - t0
                if elapsed >= budget:
                    raise AssertionError(f"took {elapsed:.1f}s, budget {budget:g}s")
            except Exception as exc:  # reported, then re-raised
                error = exc
                detail = f"{detail} {type(exc).__name__}: {exc}".strip()
            elapsed = time.perf_counter() - t0
            status = "FAIL" if error else "PASS"
            with capsys.disabled():
                print(f"\n[criterion {number:2d}] {status} ({elapsed:.1f}s / {budget:g}s) {detail}")
            if error:
                raise error

        run.__name__, run.__doc__ = check.__name__, check.__doc__
        return run

    return wrap


def majority(flags) -> bool:
    flags = list(flags)
    return 2 * sum(flags) > len(flags)


def random_updates(rng, n=None, template=None):
    """Weighted models with random shapes, weights and magnitudes."""
    n = n or int(rng.integers(1, 10))
    if template is None:
        shape = {f"p{i}": int(rng.integers(1, 5)) for i in range(int(rng.integers(1, 4)))}
    else:
        shape = template.shapes
    scale = 10.0 ** float(rng.integers(-3, 6))
    return [
        WeightedModel(
            ParamVector({k: rng.normal(0, scale, size=s) for k, s in shape.items()}),
            float(rng.uniform(0.01, 1000)),
            sender=f"c{i:02d}",
        )
        for i in range(n)
    ]


def blobs_config(seed, scheme="iid", aggregation="weighted_mean", attacker=False, transport="inproc"):
    clients = [f"c{i}" for i in range(9 if attacker else 8)]
    return config_from_dict(
        {
            "seed": seed,
            "topology": {"nodes": ["server", *clients], "directed": [["server", c] for c in clients]},
            "pipeline": {"aggregation": aggregation},
            "plan": {"total_rounds": 30},
            "trainer": {"model": "logreg", "local_epochs": 5, "lr": 0.5, "batch_size": 32},
            "data": {
                "dataset": {"n": 2000, "d": 2, "classes": 2, "separation": 6.0, "test_size": 1000},
                "partition": {"scheme": scheme, "shards_per_client": 1},
            },
            "attack": {"clients": ["c8"]} if attacker else {},
            "transport": transport,
        }
    )


class Const:
    lr = 1.0

    def __init__(self, value, weight):
        self.value, self.weight = ParamVector({"w": value}), weight

    def train(self, global_params, round_num, anchor=None, correction=None):
        return TrainResult(self.value, self.weight, 0.0, 1)


@criterion(1, 30)
def test_criterion_01_aggregation_algebra():
    rng = np.random.default_rng(1)
    shuffler = random.Random(1)
    cases = 1000
    for _ in range(cases):
        ups = random_updates(rng)
        perm = list(ups)
        shuffler.shuffle(perm)
        for rule in RULES:
            out = aggregate(rule, ups)
            assert aggregate(rule, perm) == out, f"{rule.kind} depends on input order"
            for name in out:
                stack = np.stack([u.params[name] for u in ups])
                assert np.all(out[name] >= stack.min(axis=0)) and np.all(out[name] <= stack.max(axis=0)), (
                    f"{rule.kind} left the hull"
                )
    for _ in range(cases):
        x = random_updates(rng, n=1)[0].params
        ups = [WeightedModel(x, u.weight, sender=u.sender) for u in random_updates(rng, template=x)]
        for rule in RULES:
            assert aggregate(rule, ups) == x, f"{rule.kind} is not idempotent"
    for _ in range(cases):
        ups = random_updates(rng)
        w = float(rng.uniform(0.01, 1000))
        equal = [WeightedModel(u.params, w, sender=u.sender) for u in ups]
        a, b = aggregate("weighted_mean", equal), aggregate("equal_mean", ups)
        assert all(np.allclose(a[n], b[n], rtol=1e-12, atol=0) for n in a)
    for _ in range(cases):
        grad, local, glob, cv = (u.params for u in random_updates(rng, n=4))
        assert proximal_gradient(grad, local, glob, 0.0) is grad
        out = corrected_gradient(grad, zeros_like(grad), zeros_like(grad))
        assert all(out[n].tobytes() == grad[n].tobytes() for n in grad)
        out = corrected_gradient(grad, cv, cv)
        assert all(out[n].tobytes() == grad[n].tobytes() for n in grad)
    return f"{cases} cases each: permutation, hull, idempotence, equal weights, mu=0, zero variates"


@criterion(2, 10)
def test_criterion_02_hierarchy_equals_flat():
    worst = 0.0
    plan = RoundPlan(total_rounds=1, straggler_timeout_ms=10_000)
    x0 = ParamVector({"w": np.zeros(5)})
    for seed in range(100):
        g, leaves = random_two_level_tree(np.random.default_rng(seed))
        learners = {leaf: Const(v, w) for leaf, (w, v) in leaves.items()}
        got = run_hierarchy(decompose(g), 1, PipelineConfig(), plan, InProcTransport(), learners, x0)
        want = aggregate(
            "weighted_mean", [WeightedModel(ParamVector({"w": v}), w, sender=n) for n, (w, v) in leaves.items()]
        )
        err = float(np.abs(got["w"] - want["w"]).max() / np.abs(want["w"]).max())
        worst = max(worst, err)
    assert worst <= 1e-9, f"relative error {worst:.2e}"
    return f"100 two-level trees, worst relative error {worst:.1e}"


@criterion(3, 10)
def test_criterion_03_decomposition_soundness():
    rng = np.random.default_rng(3)
    for _ in range(200):
        g = random_graph(rng)
        groups = decompose(g)
        directed = [grp for grp in groups if not grp.undirected]
        assert sorted((grp.hub, m) for grp in directed for m in grp.members) == sorted(g.edges)
        peer = {frozenset((grp.hub, m)) for grp in groups if grp.undirected for m in grp.members}
        assert peer == g.undirected_edges
        for grp in groups:
            sub = [x for x in decompose(induced_star(g, grp, not grp.undirected)) if x.hub == grp.hub]
            assert len(sub) == 1 and sub[0].members == grp.members
        index = {grp.hub: i for i, grp in enumerate(directed)}
        depth = {grp.hub: grp.depth for grp in directed}
        for u, v in g.edges:
            if v in index:
                assert index[v] < index[u] and depth[v] > depth[u]
    for _ in range(200):
        g = random_graph(rng, n_nodes=int(rng.integers(2, 10)), acyclic=False)
        ids = sorted(g.nodes)
        cycle = list(rng.permutation(ids)[: int(rng.integers(2, len(ids) + 1))])
        for u, v in zip(cycle, cycle[1:] + cycle[:1]):
            if (u, v) not in g.edges:
                g.add_edge(u, v)
        with pytest.raises(CyclicLeadership):
            decompose(g)
    return "200 random graphs sound and ordered bottom-up, 200 cyclic graphs rejected"


@criterion(4, 5)
def test_criterion_04_single_client_equals_central():
    ds = make_blobs(500, 2, 2, 6.0, seed=4)
    tc = TrainerConfig(model="mlp", hidden=8, local_epochs=1, lr=0.2, seed=44)
    g = TopologyGraph().add_node("server").add_node("client").add_edge("server", "client")
    fed_params = central = init_params(tc, 2, 2, seed=4)
    worst = 0.0
    learners = {"client": ShardLearner("client", ds, tc)}
    with Federation(decompose(g), InProcTransport(), learners, PipelineConfig(), RoundPlan(total_rounds=20)) as fed:
        for r in range(20):
            fed_params, _ = fed.run_round(fed_params, r)
            central = local_train(central, ds, tc, seed=round_seed(tc.seed, "client", r)).params
            worst = max(worst, float(np.abs(fed_params.flatten() - central.flatten()).max()))
            assert worst <= 1e-12, f"round {r}: deviation {worst:.2e}"
    return f"20 rounds, max deviation {worst:.1e}"


@criterion(5, 5)
def test_criterion_05_gradient_oracle():
    rng = np.random.default_rng(5)
    worst, h = 0.0, 1e-6
    for model in ("logreg", "mlp"):
        for _ in range(20):
            n, d, k = int(rng.integers(4, 16)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
            X, y = rng.normal(size=(n, d)), rng.integers(0, k, size=n)
            base = init_params(TrainerConfig(model=model, hidden=5), d, k, int(rng.integers(1 << 30)))
            params = {name: v + rng.normal(0, 0.5, v.size) for name, v in base.items()}
            _, grad = loss_and_grad(ParamVector(params), X, y)
            fd = []
            for name in sorted(params):
                for i in range(params[name].size):
                    hi = {q: v.copy() for q, v in params.items()}
                    lo = {q: v.copy() for q, v in params.items()}
                    hi[name][i] += h
                    lo[name][i] -= h
                    up = loss_and_grad(ParamVector(hi), X, y)[0]
                    down = loss_and_grad(ParamVector(lo), X, y)[0]
                    fd.append((up - down) / (2 * h))
            a, b = grad.flatten(), np.array(fd)
            worst = max(worst, float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)))
    assert worst < 1e-4, f"relative error {worst:.2e}"
    return f"20 logreg + 20 mlp instances, worst relative error {worst:.1e}"


@criterion(6, 60)
def test_criterion_06_convergence_iid_vs_shards():
    rows, votes = [], []
    for seed in SEEDS:
        iid = run_experiment(blobs_config(seed, "iid"))
        shards = run_experiment(blobs_config(seed, "shards"))
        r_iid, r_shards = iid.rounds_to_accuracy(0.90), shards.rounds_to_accuracy(0.90)
        votes.append(
            iid.final_accuracy >= 0.95
            and shards.final_accuracy >= 0.90
            and r_iid is not None
            and r_shards is not None
            and r_shards > r_iid
        )
        rows.append(f"s{seed} iid={iid.final_accuracy:.3f}@r{r_iid} shards={shards.final_accuracy:.3f}@r{r_shards}")
    detail = f"{sum(votes)}/5 seeds pass [{'; '.join(rows)}]"
    assert majority(votes), detail
    return detail


@criterion(7, 60)
def test_criterion_07_median_resists_poisoning():
    rows, votes = [], []
    for seed in SEEDS:
        median = run_experiment(blobs_config(seed, aggregation="coordinate_median", attacker=True))
        mean = run_experiment(blobs_config(seed, aggregation="weighted_mean", attacker=True))
        votes.append(median.final_accuracy >= 0.90 and mean.final_accuracy < 0.60)
        rows.append(f"s{seed} median={median.final_accuracy:.3f} mean={mean.final_accuracy:.3f}")
    detail = f"{sum(votes)}/5 seeds pass [{'; '.join(rows)}]"
    assert majority(votes), detail
    return detail


@criterion(8, 5)
def test_criterion_08_gossip_consensus():
    g = TopologyGraph()
    nodes = [f"n{i}" for i in range(8)]
    for n in nodes:
        g.add_node(n)
    for i in range(8):
        g.add_edge(nodes[i], nodes[(i + 1) % 8], directed=False)
    groups = decompose(g)
    rng = np.random.default_rng(8)
    models = {n: ParamVector({"w": rng.normal(0, 10, size=4), "b": rng.normal(size=2)}) for n in nodes}
    start = np.mean([m.flatten() for m in models.values()], axis=0)
    transport = InProcTransport()
    drift = 0.0
    for r in range(100):
        models = run_decentralized_round(groups, models, transport=transport, round_num=r)
        avg = np.mean([m.flatten() for m in models.values()], axis=0)
        drift = max(drift, float(np.abs(avg - start).max()))
    spread = max(l2_distance(models[a], models[b]) for a in nodes for b in nodes)
    assert spread < 1e-6, f"pairwise distance {spread:.2e}"
    assert drift <= 1e-9, f"average drifted by {drift:.2e}"
    return f"ring of 8, 100 rounds: max pairwise distance {spread:.1e}, average drift {drift:.1e}"


def random_envelope(rng) -> Envelope:
    kind = Kind(int(rng.integers(1, 8)))
    params = None
    if kind in PARAM_KINDS:
        # Raw bit patterns cover subnormals, signed zeros and extreme exponents.
        raw = rng.integers(0, 2**63, size=int(rng.integers(1, 20)), dtype=np.int64).view(np.float64)
        raw = np.where(np.isfinite(raw), raw, 0.0) * rng.choice([-1.0, 1.0], size=raw.size)
        params = ParamVector({"w": raw, "b": rng.normal(size=int(rng.integers(1, 4)))})
    aux = {f"k{i}": repr(float(rng.normal())) for i in range(int(rng.integers(0, 4)))}
    return Envelope(
        kind,
        int(rng.integers(0, 2**63)),
        f"node-{int(rng.integers(1000))}",
        int(rng.integers(0, 2**32)),
        params,
        aux,
    )


@criterion(9, 30)
def test_criterion_09_transport_equivalence_and_codec():
    inproc = run_experiment(blobs_config(0, "iid", transport="inproc"))
    tcp = run_experiment(blobs_config(0, "iid", transport="tcp"))
    assert inproc.final_accuracy == tcp.final_accuracy
    assert inproc.final_params == tcp.final_params

    rng = np.random.default_rng(9)
    for _ in range(1000):
        e = random_envelope(rng)
        frame = encode(e)
        back = decode(frame)
        assert back == e and encode(back) == frame
        if e.params is not None:
            assert all(back.params[n].tobytes() == e.params[n].tobytes() for n in e.params)

    frame = encode(Envelope(Kind.MODEL_UPDATE, 1, "c", 0, ParamVector({"w": [1.0, 2.0]})))
    bad = bytearray(frame)
    bad[0] ^= 0xFF
    with pytest.raises(BadMagic):
        decode(bytes(bad))
    bad = bytearray(frame)
    bad[2] = 9
    with pytest.raises(UnsupportedVersion):
        decode(bytes(bad))
    with pytest.raises(Truncated):
        decode(frame[:-10])
    bad = bytearray(frame)
    bad[-8] ^= 0x10  # inside the last double
    with pytest.raises(ChecksumMismatch):
        decode(bytes(bad))
    return f"inproc and tcp final accuracy {inproc.final_accuracy:.4f}, 1000 envelopes bit-exact, 4 corruptions rejected"


@criterion(10, 5)
def test_criterion_10_control_variate_sync():
    ds = make_blobs(800, 2, 2, 6.0, seed=10)
    tc = TrainerConfig(local_epochs=2, lr=0.2, seed=10)
    clients = [f"c{i}" for i in range(8)]
    g = TopologyGraph().add_node("server")
    for c in clients:
        g.add_node(c).add_edge("server", c)
    learners = {c: ShardLearner(c, ds.subset(range(i * 100, (i + 1) * 100)), tc) for i, c in enumerate(clients)}
    params = init_params(tc, 2, 2)
    worst = 0.0
    cfg = PipelineConfig(state_sync=True)
    with Federation(decompose(g), InProcTransport(), learners, cfg, RoundPlan(total_rounds=5)) as fed:
        for r in range(5):
            params, _ = fed.run_round(params, r)
            variates = [fed.nodes[c]._client_variates[0] for c in clients]
            mean = aggregate("equal_mean", [WeightedModel(v, sender=c) for c, v in zip(clients, variates)])
            worst = max(worst, l2_distance(fed.root_hub.control.server_variate, mean))
    assert worst <= 1e-9, f"server variate off the client mean by {worst:.2e}"

    rng = np.random.default_rng(10)

    def rand():
        return ParamVector({"w": rng.normal(size=4)})

    state = ControlState.zeros(rand(), clients)
    assert sync_control_state(state, [], {}) is state
    partial = 0.0
    for _ in range(50):
        part = sorted(rng.choice(clients, size=int(rng.integers(1, 8)), replace=False))
        state = sync_control_state(state, part, {c: rand() for c in part})
        mean = aggregate("equal_mean", [WeightedModel(x, sender=c) for c, x in state.client_variates.items()])
        partial = max(partial, l2_distance(state.server_variate, mean))
        same = sync_control_state(state, part, {c: state.client_variates[c] for c in part})
        assert same.server_variate == state.server_variate
        assert sync_control_state(state, [], {}) is state
    assert partial <= 1e-9, f"partial sync drifted from the client mean by {partial:.2e}"
    return f"full sync error {worst:.1e}, partial sync error {partial:.1e}, fixed points hold"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
