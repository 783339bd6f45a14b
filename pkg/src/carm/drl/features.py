"""State encoding for the decision engine.

A state is twelve numbers: six raw metrics observed before an agent's
specification was applied, followed by the same six observed after. Each raw
metric is divided by a fixed scale stored with the model.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from carm.errors import MissingFeature
from carm.metrics import MetricsSample

FEATURES = ("replicas", "cpu_usage", "mem_usage", "cpu_alloc", "mem_alloc", "latency")
STATE_DIM = 2 * len(FEATURES)

DEFAULT_SCALES: dict[str, float] = {
    "replicas": 10.0,
    "cpu_usage": 4.0,
    "mem_usage": 8e9,
    "cpu_alloc": 4.0,
    "mem_alloc": 8e9,
    "latency": 30.0,
}


class Action(IntEnum):
    OPTIMIZE = 0
    MIGRATE = 1
    SCALE_DOWN = 2
    SCALE_UP = 3


@dataclass(frozen=True)
class Aggregate:
    """Window summary of one deployment. Allocations are per replica."""

    replicas: float
    cpu_usage: float
    mem_usage: float
    cpu_alloc: float
    mem_alloc: float
    latency: float

    @classmethod
    def from_samples(cls, samples: Sequence[MetricsSample]) -> Aggregate:
        """Average a window. An unset limit counts as allocation equal to usage."""
        if not samples:
            raise MissingFeature("cannot aggregate an empty window")
        n = len(samples)

        def mean(values):
            return math.fsum(values) / n

        return cls(
            replicas=mean([s.replicas for s in samples]),
            cpu_usage=mean([s.cpu_usage for s in samples]),
            mem_usage=mean([s.mem_usage for s in samples]),
            cpu_alloc=mean([s.cpu_usage if s.cpu_limit is None else s.cpu_limit for s in samples]),
            mem_alloc=mean([s.mem_usage if s.mem_limit is None else s.mem_limit for s in samples]),
            latency=mean([s.latency for s in samples]),
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, object], *, where: str = "") -> Aggregate:
        values = {}
        for name in FEATURES:
            value = data.get(name) if isinstance(data, Mapping) else None
            if value is None:
                raise MissingFeature(f"missing feature {where}{name}", field=f"{where}{name}")
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise MissingFeature(f"feature {where}{name} must be a finite number", field=f"{where}{name}")
            values[name] = float(value)
        return cls(**values)

    def to_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in FEATURES}

    @property
    def total_cpu_alloc(self) -> float:
        return self.cpu_alloc * self.replicas


@dataclass(frozen=True)
class DrlState:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) != STATE_DIM:
            raise ValueError(f"state must have {STATE_DIM} features, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("state features must be finite")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @property
    def before(self) -> tuple[float, ...]:
        return self.values[: len(FEATURES)]

    @property
    def after(self) -> tuple[float, ...]:
        return self.values[len(FEATURES) :]

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> DrlState:
        return cls(tuple(float(x) for x in arr))


def featurize(
    before: Aggregate | Mapping[str, object],
    after: Aggregate | Mapping[str, object],
    scales: Mapping[str, float] = DEFAULT_SCALES,
) -> DrlState:
    if not isinstance(before, Aggregate):
        before = Aggregate.from_dict(before, where="before.")
    if not isinstance(after, Aggregate):
        after = Aggregate.from_dict(after, where="after.")
    values = [getattr(before, f) / scales[f] for f in FEATURES]
    values += [getattr(after, f) / scales[f] for f in FEATURES]
    return DrlState(tuple(values))
