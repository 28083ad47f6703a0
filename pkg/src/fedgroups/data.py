"""Synthetic datasets, client partitioners and local trainers.

Models are softmax regression (``logreg``) or a one-hidden-layer tanh MLP
(``mlp``), stored as flat :class:`ParamVector` entries::

    logreg: W (d*K, row-major d x K), b (K)
    mlp:    W1 (d*h), b1 (h), W2 (h*K), b2 (K)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .fedopt import corrected_gradient, proximal_gradient
from .params import ParamVector, ShapeMismatch, NonFiniteParams, axpy

MODELS = ("logreg", "mlp")
PARTITION_SCHEMES = ("iid", "dirichlet", "shards")


class NonFiniteLoss(ArithmeticError):
    """Local training diverged."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"features must be (n, d) and labels (n,), got {X.shape} and {y.shape}")
        if X.shape[0] < 1:
            raise ValueError("a dataset needs at least one example")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.seed)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def make_blobs(n: int, d: int, K: int, separation: float, seed: int = 0) -> Dataset:
    """``K`` unit-variance Gaussian clusters with consecutive centers ``separation`` apart.

    Centers sit on the diagonal direction ``(1, ..., 1) / sqrt(d)`` at
    ``(k + 1/2) * separation``, so no cluster is centred on the origin and a
    model has to learn its bias. Class sizes differ by at most one.
    """
    if n < K:
        raise ValueError(f"need n >= K, got n={n}, K={K}")
    rng = np.random.default_rng(seed)
    direction = np.ones(d) / np.sqrt(d)
    centers = separation * (np.arange(K) + 0.5)[:, None] * direction[None, :]
    labels = rng.permutation(np.arange(n) % K)
    features = centers[labels] + rng.standard_normal((n, d))
    return Dataset(features, labels, K, seed)


def flip_labels(ds: Dataset) -> Dataset:
    return Dataset(ds.features, (ds.labels + 1) % ds.num_classes, ds.num_classes, ds.seed)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    n, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", n, d, ds.num_classes))
        fh.write(ds.features.astype("<f8").tobytes(order="C"))
        fh.write(ds.labels.astype("<u4").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated dataset header")
    n, d, K = struct.unpack_from("<III", raw)
    expected = 12 + 8 * n * d + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=12).reshape(n, d).astype(np.float64)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=12 + 8 * n * d).astype(np.int64)
    return Dataset(X, y, K)


# -- partitioning -----------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    assignment: dict[str, list[int]]
    scheme: str = "iid"
    alpha: float | None = None
    shards_per_client: int | None = None

    def shard(self, ds: Dataset, client: str) -> Dataset:
        return ds.subset(self.assignment[client])

    def label_histograms(self, ds: Dataset) -> dict[str, list[int]]:
        return {
            c: np.bincount(ds.labels[idx], minlength=ds.num_classes).tolist()
            for c, idx in self.assignment.items()
        }


def _repair_empty(shares: list[list[int]]) -> list[list[int]]:
    """Give every empty share one example taken from the largest share."""
    shares = [sorted(s) for s in shares]
    while any(not s for s in shares):
        empty = next(i for i, s in enumerate(shares) if not s)
        donor = max(range(len(shares)), key=lambda i: (len(shares[i]), -i))
        shares[empty].append(shares[donor].pop())
    return shares


def partition(
    ds: Dataset,
    clients: list[str],
    scheme: str = "iid",
    seed: int = 0,
    *,
    alpha: float = 0.5,
    shards_per_client: int = 2,
) -> PartitionSpec:
    """Assign every example index of ``ds`` to exactly one client.

    iid
        balanced random split (sizes differ by at most one).
    dirichlet
        per class, proportions across clients drawn from Dirichlet(alpha).
    shards
        sort by label, cut into ``len(clients) * shards_per_client`` equal
        shards and deal ``shards_per_client`` random shards to each client.

    A client left empty receives one example from the largest share.
    """
    if not clients:
        raise ValueError("need at least one client")
    if len(set(clients)) != len(clients):
        raise ValueError("client ids must be unique")
    n, m = len(ds), len(clients)
    if n < m:
        raise ValueError(f"cannot split {n} examples over {m} clients")
    rng = np.random.default_rng(seed)

    if scheme == "iid":
        shares = [s.tolist() for s in np.array_split(rng.permutation(n), m)]
        extra = {}
    elif scheme == "dirichlet":
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        shares = [[] for _ in range(m)]
        for k in range(ds.num_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == k))
            if idx.size == 0:
                continue
            props = rng.dirichlet(np.full(m, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for share, part in zip(shares, np.split(idx, cuts)):
                share.extend(part.tolist())
        extra = {"alpha": float(alpha)}
    elif scheme == "shards":
        if shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")
        total = m * shards_per_client
        if total > n:
            raise ValueError(f"{total} shards need at least {total} examples, have {n}")
        by_label = np.argsort(ds.labels, kind="stable")
        shards = np.array_split(by_label, total)
        order = rng.permutation(total)
        shares = [
            np.concatenate([shards[j] for j in order[i * shards_per_client:(i + 1) * shards_per_client]]).tolist()
            for i in range(m)
        ]
        extra = {"shards_per_client": int(shards_per_client)}
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")

    shares = _repair_empty(shares)
    return PartitionSpec({c: sorted(s) for c, s in zip(clients, shares)}, scheme, **extra)


def label_skew(spec: PartitionSpec, ds: Dataset) -> float:
    """Mean total-variation distance between client label mixes and the global mix."""
    glob = ds.class_counts() / len(ds)
    tvs = []
    for counts in spec.label_histograms(ds).values():
        counts = np.asarray(counts, dtype=np.float64)
        tvs.append(0.5 * np.abs(counts / counts.sum() - glob).sum())
    return float(np.mean(tvs))


# -- models -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    model: str = "logreg"
    hidden: int = 16
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    early_stop_patience: int | None = None
    l2: float = 0.0
    seed: int = 0
    augment_sigma: float = 0.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.l2 < 0 or self.augment_sigma < 0:
            raise ValueError("l2 and augment_sigma must be non-negative")
        if self.model == "mlp" and self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


def init_params(cfg: TrainerConfig, d: int, K: int, seed: int = 0) -> ParamVector:
    """Logistic regression starts at zero; the MLP needs a random start."""
    if cfg.model == "logreg":
        return ParamVector({"W": np.zeros(d * K), "b": np.zeros(K)})
    rng = np.random.default_rng(seed)
    h = cfg.hidden
    return ParamVector({
        "W1": rng.standard_normal(d * h) / np.sqrt(d),
        "b1": np.zeros(h),
        "W2": rng.standard_normal(h * K) / np.sqrt(h),
        "b2": np.zeros(K),
    })


def _arch(params: ParamVector, d: int) -> tuple[str, int, int]:
    """Return (model, hidden, K) after checking ``params`` against input dim ``d``."""
    names = set(params)
    if names == {"W", "b"}:
        K = params["b"].size
        if params["W"].size != d * K:
            raise ShapeMismatch(f"W has {params['W'].size} entries, expected {d}x{K}")
        return "logreg", 0, K
    if names == {"W1", "b1", "W2", "b2"}:
        h, K = params["b1"].size, params["b2"].size
        if params["W1"].size != d * h or params["W2"].size != h * K:
            raise ShapeMismatch(f"MLP shapes do not match d={d}, h={h}, K={K}")
        return "mlp", h, K
    raise ShapeMismatch(f"unrecognised parameter names {sorted(names)}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(params: ParamVector, X: np.ndarray):
    model, h, K = _arch(params, X.shape[1])
    d = X.shape[1]
    if model == "logreg":
        return X @ params["W"].reshape(d, K) + params["b"], None
    hid = np.tanh(X @ params["W1"].reshape(d, h) + params["b1"])
    return hid @ params["W2"].reshape(h, K) + params["b2"], hid


def loss_and_grad(params: ParamVector, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, ParamVector]:
    """Mean cross-entropy plus ``l2/2 * ||params||^2`` and its analytic gradient."""
    n, d = X.shape
    model, h, K = _arch(params, d)
    logits, hid = _forward(params, X)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    if model == "logreg":
        grads = {"W": (X.T @ dlogits).ravel(), "b": dlogits.sum(axis=0)}
    else:
        W2 = params["W2"].reshape(h, K)
        dhid = (dlogits @ W2.T) * (1.0 - hid**2)
        grads = {
            "W1": (X.T @ dhid).ravel(),
            "b1": dhid.sum(axis=0),
            "W2": (hid.T @ dlogits).ravel(),
            "b2": dlogits.sum(axis=0),
        }
    if l2:
        loss += 0.5 * l2 * sum(float(a @ a) for a in params.values())
        grads = {k: g + l2 * params[k] for k, g in grads.items()}
    return float(loss), ParamVector._trusted(dict(sorted(grads.items())))


def predict_logits(params: ParamVector, X: np.ndarray) -> np.ndarray:
    return _forward(params, np.asarray(X, dtype=np.float64))[0]


def predict_proba(params: ParamVector, X: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(predict_logits(params, X)))


def cross_entropy(params: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
    logits, _ = _forward(params, X)
    return float(-_log_softmax(logits)[np.arange(len(y)), y].mean())


def evaluate(model: ParamVector, ds: Dataset) -> tuple[float, float]:
    """Mean 0/1 accuracy and mean cross-entropy of ``model`` on ``ds``."""
    logits, _ = _forward(model, ds.features)
    if logits.shape[1] != ds.num_classes:
        raise ShapeMismatch(f"model predicts {logits.shape[1]} classes, dataset has {ds.num_classes}")
    acc = float((logits.argmax(axis=1) == ds.labels).mean())
    loss = float(-_log_softmax(logits)[np.arange(len(ds)), ds.labels].mean())
    return acc, loss


class TrainResult(NamedTuple):
    params: ParamVector
    num_samples: int
    loss: float
    steps: int = 0
    val_loss: float | None = None


def local_train(
    model_in: ParamVector,
    shard: Dataset,
    cfg: TrainerConfig,
    anchor: tuple[ParamVector, float] | None = None,
    correction: tuple[ParamVector, ParamVector] | None = None,
    seed: int | None = None,
) -> TrainResult:
    """Minibatch SGD on ``shard`` starting from ``model_in``.

    ``anchor=(global, mu)`` adds the proximal term to every step;
    ``correction=(client_variate, server_variate)`` applies the control-variate
    correction. With ``early_stop_patience`` set, the last 10% of the shard's
    shuffled indices become a validation split and the best epoch is returned.
    ``loss`` is the training cross-entropy of the returned model.
    """
    _arch(model_in, shard.dim)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    X, y = shard.features, shard.labels
    n = len(shard)

    train_idx = np.arange(n)
    val_idx = None
    if cfg.early_stop_patience is not None and n >= 2:
        order = rng.permutation(n)
        n_val = max(1, int(round(0.1 * n)))
        train_idx, val_idx = order[:-n_val], order[-n_val:]

    params = model_in
    steps = 0
    best = (cross_entropy(params, X[val_idx], y[val_idx]), params, 0) if val_idx is not None else None
    stale = 0
    try:
        for _ in range(cfg.local_epochs):
            perm = rng.permutation(train_idx)
            for start in range(0, perm.size, cfg.batch_size):
                batch = perm[start:start + cfg.batch_size]
                Xb = X[batch]
                if cfg.augment_sigma > 0:
                    Xb = Xb + rng.normal(0.0, cfg.augment_sigma, Xb.shape)
                loss, grad = loss_and_grad(params, Xb, y[batch], cfg.l2)
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"loss became {loss} after {steps} steps")
                if anchor is not None:
                    grad = proximal_gradient(grad, params, anchor[0], anchor[1])
                if correction is not None:
                    grad = corrected_gradient(grad, correction[0], correction[1])
                params = axpy(-cfg.lr, grad, params)
                steps += 1
            if best is not None:
                val = cross_entropy(params, X[val_idx], y[val_idx])
                if val < best[0]:
                    best, stale = (val, params, steps), 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        break
    except NonFiniteParams as exc:
        raise NonFiniteLoss(str(exc)) from exc

    val_loss = None
    if best is not None:
        val_loss, params, steps = best
    final = cross_entropy(params, X[train_idx], y[train_idx])
    if not np.isfinite(final):
        raise NonFiniteLoss(f"final loss is {final}")
    return TrainResult(params, n, final, steps, val_loss)
