"""Named dense parameter containers and the arithmetic built on them."""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Two parameter vectors disagree on names or array lengths."""


class NonFiniteParams(ValueError):
    """A parameter array contains NaN or Inf."""


class ParamVector(Mapping):
    """Immutable ordered map from parameter name to a 1-D float64 array.

    Names iterate in lexicographic order. Arrays are copied on construction
    and marked read-only, so instances can be shared between threads.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, object] | None = None):
        built: dict[str, np.ndarray] = {}
        for name in sorted(entries or {}):
            if not isinstance(name, str) or not name:
                raise ValueError(f"parameter names must be non-empty strings, got {name!r}")
            arr = np.array(entries[name], dtype=np.float64).reshape(-1)
            if arr.size == 0:
                raise ValueError(f"parameter {name!r} is empty")
            if not np.isfinite(arr).all():
                raise NonFiniteParams(f"parameter {name!r} has non-finite values")
            arr.flags.writeable = False
            built[name] = arr
        self._entries = built

    @classmethod
    def _trusted(cls, entries: dict[str, np.ndarray]) -> ParamVector:
        # Skips copying; callers pass freshly computed arrays in sorted order.
        out = cls.__new__(cls)
        for name, arr in entries.items():
            if not np.isfinite(arr).all():
                raise NonFiniteParams(f"parameter {name!r} has non-finite values")
            arr.flags.writeable = False
        out._entries = entries
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self._entries.keys() == other._entries.keys() and all(
            np.array_equal(a, other._entries[n]) for n, a in self._entries.items()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        body = ", ".join(f"{n}: {a.tolist()}" for n, a in self._entries.items())
        return f"ParamVector({{{body}}})"

    @property
    def shapes(self) -> dict[str, int]:
        return {n: a.size for n, a in self._entries.items()}

    @property
    def size(self) -> int:
        return sum(a.size for a in self._entries.values())

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate(list(self._entries.values()))

    def to_dict(self) -> dict[str, list[float]]:
        return {n: a.tolist() for n, a in self._entries.items()}


@dataclass(frozen=True)
class WeightedModel:
    """A model contribution with its aggregation weight.

    ``sender`` fixes the summation order inside aggregators; it is empty for
    anonymous contributions.
    """

    params: ParamVector
    weight: float = 1.0
    round: int = 0
    sender: str = ""

    def __post_init__(self):
        if not self.weight >= 0:
            raise ValueError(f"weight must be non-negative, got {self.weight}")
        if self.round < 0:
            raise ValueError(f"round must be non-negative, got {self.round}")


def check_same_shape(x: ParamVector, y: ParamVector) -> None:
    if x.shapes != y.shapes:
        raise ShapeMismatch(f"shape mismatch: {x.shapes} vs {y.shapes}")


def zeros_like(p: ParamVector) -> ParamVector:
    return ParamVector._trusted({n: np.zeros_like(a) for n, a in p.items()})


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``alpha * x + y`` elementwise."""
    check_same_shape(x, y)
    return ParamVector._trusted({n: alpha * x[n] + y[n] for n in x})


def scale(alpha: float, x: ParamVector) -> ParamVector:
    return ParamVector._trusted({n: alpha * a for n, a in x.items()})


def subtract(x: ParamVector, y: ParamVector) -> ParamVector:
    check_same_shape(x, y)
    return ParamVector._trusted({n: x[n] - y[n] for n in x})


def l2_distance(x: ParamVector, y: ParamVector) -> float:
    check_same_shape(x, y)
    if not x:
        return 0.0
    diff = np.concatenate([x[n] - y[n] for n in x])
    return float(np.linalg.norm(diff))
