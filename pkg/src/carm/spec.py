"""Agent specifications: the declarative resource rules users submit.

An agent is a value object. Status changes go through :meth:`AgentSpec.transition`,
which enforces the lifecycle graph; everything else builds new copies with
:func:`dataclasses.replace`.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Any

from carm.errors import (
    EmptyTarget,
    IllegalTransition,
    MalformedSpec,
    NonPositiveQuota,
    UnknownScope,
    UnknownTarget,
)

if TYPE_CHECKING:
    from carm.sim import ClusterState


class Scope(str, Enum):
    NODE = "node"
    NAMESPACE = "namespace"
    DEPLOYMENT = "deployment"


class AgentStatus(str, Enum):
    PENDING = "pending"
    ACTIVE = "active"
    CONFLICTING = "conflicting"
    ESCALATED = "escalated"
    RESOLVED = "resolved"
    DELETED = "deleted"


class ConflictClass(str, Enum):
    NONE = "none"
    SPECIFICATION = "specification"
    OPTIMIZATION = "optimization"


_TRANSITIONS: dict[AgentStatus, frozenset[AgentStatus]] = {
    AgentStatus.PENDING: frozenset({AgentStatus.ACTIVE}),
    AgentStatus.ACTIVE: frozenset({AgentStatus.CONFLICTING}),
    AgentStatus.CONFLICTING: frozenset({AgentStatus.ESCALATED}),
    AgentStatus.ESCALATED: frozenset({AgentStatus.RESOLVED}),
    AgentStatus.RESOLVED: frozenset({AgentStatus.ACTIVE}),
    AgentStatus.DELETED: frozenset(),
}


def can_transition(src: AgentStatus, dst: AgentStatus) -> bool:
    if dst is AgentStatus.DELETED:
        return src is not AgentStatus.DELETED
    return dst in _TRANSITIONS[src]


def status_path(src: AgentStatus, dst: AgentStatus) -> list[AgentStatus]:
    """Shortest legal sequence of statuses leading from ``src`` to ``dst``
    (excluding ``src``). Raises IllegalTransition when none exists."""
    if src is dst:
        return []
    frontier = [[src]]
    seen = {src}
    while frontier:
        path = frontier.pop(0)
        for nxt in AgentStatus:
            if nxt in seen or not can_transition(path[-1], nxt):
                continue
            if nxt is dst:
                return path[1:] + [nxt]
            seen.add(nxt)
            frontier.append(path + [nxt])
    raise IllegalTransition(f"no legal path {src.value} -> {dst.value}")


DOCUMENT_KEYS = ("scope", "target", "cpu_factor", "mem_factor", "cpu_cap", "mem_cap")


@dataclass(frozen=True)
class ResourceQuota:
    """Multipliers on observed usage, with optional absolute ceilings.

    A dimension whose factor is ``None`` is not managed by the agent.
    """

    cpu_factor: float | None = None
    mem_factor: float | None = None
    cpu_cap: float | None = None
    mem_cap: float | None = None

    def __post_init__(self) -> None:
        for name in ("cpu_factor", "mem_factor", "cpu_cap", "mem_cap"):
            value = getattr(self, name)
            if value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise MalformedSpec(f"{name} must be a number", field=name)
            if not math.isfinite(value) or value <= 0:
                raise NonPositiveQuota(f"{name} must be positive and finite, got {value!r}", field=name)
        if self.cpu_factor is None and self.mem_factor is None:
            raise MalformedSpec("quota needs cpu_factor or mem_factor", field="cpu_factor")

    @property
    def manages_cpu(self) -> bool:
        return self.cpu_factor is not None

    @property
    def manages_mem(self) -> bool:
        return self.mem_factor is not None


@dataclass(frozen=True)
class AgentSpec:
    id: str
    scope: Scope
    target: str
    quota: ResourceQuota
    status: AgentStatus = AgentStatus.PENDING
    restart_count: int = 0
    created_at: int = 0
    last_applied_at: int | None = None

    @property
    def key(self) -> tuple[Scope, str]:
        return (self.scope, self.target)

    def transition(self, status: AgentStatus) -> AgentSpec:
        if not can_transition(self.status, status):
            raise IllegalTransition(f"{self.id}: {self.status.value} -> {status.value} is not allowed")
        restarts = 0 if status is AgentStatus.RESOLVED else self.restart_count
        return replace(self, status=status, restart_count=restarts)

    def to_document(self) -> dict[str, Any]:
        """The user-facing spec document; ``validate_spec`` accepts it back."""
        doc: dict[str, Any] = {"scope": self.scope.value, "target": self.target}
        for name in DOCUMENT_KEYS[2:]:
            value = getattr(self.quota, name)
            if value is not None:
                doc[name] = value
        return doc

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            **self.to_document(),
            "status": self.status.value,
            "restart_count": self.restart_count,
            "created_at": self.created_at,
            "last_applied_at": self.last_applied_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AgentSpec:
        doc = {k: data[k] for k in DOCUMENT_KEYS if k in data}
        spec = validate_spec(doc, agent_id=data["id"], created_at=int(data.get("created_at", 0)))
        return replace(
            spec,
            status=AgentStatus(data.get("status", "pending")),
            restart_count=int(data.get("restart_count", 0)),
            last_applied_at=data.get("last_applied_at"),
        )


def validate_spec(
    raw: Mapping[str, Any],
    *,
    agent_id: str = "",
    created_at: int = 0,
    cluster: ClusterState | None = None,
) -> AgentSpec:
    """Validate a raw spec document and return a fresh ``Pending`` agent.

    Unknown keys are rejected. When ``cluster`` is given the target must also
    resolve to an existing node, namespace or deployment.
    """
    if not isinstance(raw, Mapping):
        raise MalformedSpec("spec document must be an object")
    unknown = sorted(set(raw) - set(DOCUMENT_KEYS))
    if unknown:
        raise MalformedSpec(f"unknown key {unknown[0]!r}", field=unknown[0])

    scope_raw = raw.get("scope")
    try:
        scope = Scope(scope_raw.lower() if isinstance(scope_raw, str) else scope_raw)
    except ValueError:
        raise UnknownScope(f"scope must be one of node, namespace, deployment; got {scope_raw!r}", field="scope") from None

    target = raw.get("target")
    if not isinstance(target, str) or not target.strip():
        raise EmptyTarget("target must be a non-empty string", field="target")

    quota = ResourceQuota(**{k: raw.get(k) for k in DOCUMENT_KEYS[2:]})
    spec = AgentSpec(id=agent_id, scope=scope, target=target, quota=quota, created_at=created_at)
    if cluster is not None:
        scope_targets(spec, cluster)
    return spec


def scope_targets(spec: AgentSpec, cluster: ClusterState) -> frozenset[str]:
    """Names of the deployments an agent governs in ``cluster``."""
    if spec.scope is Scope.NODE:
        if spec.target not in cluster.node_names:
            raise UnknownTarget(f"no node named {spec.target!r}", field="target")
        return frozenset(d.name for d in cluster.deployments if d.node == spec.target)
    if spec.scope is Scope.NAMESPACE:
        hosted = frozenset(d.name for d in cluster.deployments if d.namespace == spec.target)
        if not hosted and spec.target not in cluster.namespaces:
            raise UnknownTarget(f"no namespace named {spec.target!r}", field="target")
        return hosted
    if spec.target not in cluster.deployment_names:
        raise UnknownTarget(f"no deployment named {spec.target!r}", field="target")
    return frozenset({spec.target})


def overlaps(a: AgentSpec, b: AgentSpec, cluster: ClusterState) -> bool:
    return not scope_targets(a, cluster).isdisjoint(scope_targets(b, cluster))
