from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from carm.errors import EmptyWindow
from carm.metrics import MetricsSample

# relative slack when comparing allocations, so float noise is not "growth"
_ALLOC_RTOL = 1e-9


@dataclass(frozen=True)
class Outcome:
    """What happened to one deployment in the window after an action.

    ``allocation_before`` is total CPU allocation (limit times replicas, usage
    standing in for an unset limit) just before the action.
    """

    samples: Sequence[MetricsSample]
    baseline_latency: float
    allocation_before: float
    oom_kills: int = 0
    latency_factor: float = 1.30


def allocation(sample: MetricsSample) -> float:
    per_replica = sample.cpu_usage if sample.cpu_limit is None else sample.cpu_limit
    return per_replica * sample.replicas


def reward(outcome: Outcome) -> float:
    """+1 healthy and no dearer, 0 healthy but paid for with more CPU, -1 unhealthy."""
    if not outcome.samples:
        raise EmptyWindow("reward needs at least one post-action sample")
    n = len(outcome.samples)
    latency = sum(s.latency for s in outcome.samples) / n
    if outcome.oom_kills > 0 or latency > outcome.latency_factor * outcome.baseline_latency:
        return -1.0
    alloc = sum(allocation(s) for s in outcome.samples) / n
    if alloc > outcome.allocation_before * (1 + _ALLOC_RTOL):
        return 0.0
    return 1.0
