"""scikit-learn facade: train a star federation with ``fit`` and use the
global model through ``predict``/``predict_proba``/``score``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .data import Dataset, TrainerConfig, init_params, partition, predict_proba
from .fedopt import AggregationRule, PipelineConfig
from .runtime import Attack, Federation, InsufficientParticipants, RoundPlan, ShardLearner
from .topology import TopologyGraph, decompose
from .transport import InProcTransport


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Softmax regression or MLP trained by federated rounds over simulated clients.

    ``X`` is split across ``n_clients`` members of one server's group with the
    chosen partition scheme; each round the server aggregates their local
    updates. After ``fit``, ``params_`` holds the global model and
    ``history_`` the per-round reports.
    """

    def __init__(
        self,
        n_clients=8,
        rounds=30,
        partition="iid",
        alpha=0.5,
        shards_per_client=2,
        model="logreg",
        hidden=16,
        local_epochs=5,
        batch_size=32,
        lr=0.5,
        l2=0.0,
        aggregation="weighted_mean",
        trim_ratio=0.0,
        penalty_mu=0.0,
        server_lr=1.0,
        accumulate_gradients=False,
        state_sync=False,
        clients_per_round=1.0,
        poisoned_clients=0,
        random_state=None,
    ):
        self.n_clients = n_clients
        self.rounds = rounds
        self.partition = partition
        self.alpha = alpha
        self.shards_per_client = shards_per_client
        self.model = model
        self.hidden = hidden
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.l2 = l2
        self.aggregation = aggregation
        self.trim_ratio = trim_ratio
        self.penalty_mu = penalty_mu
        self.server_lr = server_lr
        self.accumulate_gradients = accumulate_gradients
        self.state_sync = state_sync
        self.clients_per_round = clients_per_round
        self.poisoned_clients = poisoned_clients
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        rng = check_random_state(self.random_state)
        seeds = rng.randint(0, 2**31 - 1, size=4)

        clients = [f"client{i:03d}" for i in range(self.n_clients)]
        graph = TopologyGraph().add_node("server")
        for c in clients:
            graph.add_node(c).add_edge("server", c)
        groups = decompose(graph)

        ds = Dataset(X, y_enc, len(self.classes_))
        spec = partition(
            ds, clients, self.partition, int(seeds[0]), alpha=self.alpha, shards_per_client=self.shards_per_client
        )
        trainer = TrainerConfig(
            model=self.model,
            hidden=self.hidden,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            l2=self.l2,
            seed=int(seeds[1]),
        )
        cfg = PipelineConfig(
            aggregation=AggregationRule(self.aggregation, self.trim_ratio),
            accumulate_gradients=self.accumulate_gradients,
            penalty_mu=self.penalty_mu,
            state_sync=self.state_sync,
            server_lr=self.server_lr,
        )
        plan = RoundPlan(self.rounds, self.clients_per_round, int(seeds[2]))
        poisoned = set(clients[: self.poisoned_clients])
        learners = {
            c: ShardLearner(c, spec.shard(ds, c), trainer, Attack() if c in poisoned else None) for c in clients
        }

        params = init_params(trainer, X.shape[1], len(self.classes_), int(seeds[3]))
        self.history_ = []
        with Federation(groups, InProcTransport(), learners, cfg, plan) as fed:
            for r in range(self.rounds):
                try:
                    params, report = fed.run_round(params, r)
                except InsufficientParticipants as exc:
                    report = exc.report
                self.history_.append(report)
        self.params_ = params
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_proba(self.params_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
