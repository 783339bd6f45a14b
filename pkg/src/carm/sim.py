"""Deterministic discrete-tick cluster simulator.

Demands and limits on a deployment are per replica. Node-level figures multiply
by the replica count. All state is immutable; every operation returns a new
:class:`ClusterState`.

Noise is drawn from a generator seeded with ``(rng_seed, tick, crc32(name))`` so
a deployment's trajectory does not depend on which other deployments exist.
"""

from __future__ import annotations

import json
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from carm.errors import (
    InsufficientCapacity,
    IoFailure,
    MalformedScenario,
    ScaleBelowOne,
    UnknownDeployment,
    UnknownNode,
)
from carm.metrics import MetricsSample

UNCHANGED: Any = type("Unchanged", (), {"__repr__": lambda self: "UNCHANGED"})()


class EventKind(str, Enum):
    OOM_KILL = "OomKill"
    MIGRATED = "Migrated"
    SCALED = "Scaled"
    LIMIT_APPLIED = "LimitApplied"


@dataclass(frozen=True)
class SimEvent:
    tick: int
    kind: EventKind
    deployment: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"tick": self.tick, "kind": self.kind.value, "deployment": self.deployment, "detail": self.detail}


@dataclass(frozen=True)
class NodeSpec:
    name: str
    cpu_capacity: float
    mem_capacity: float
    role: str = "worker"

    def __post_init__(self) -> None:
        if self.cpu_capacity <= 0 or self.mem_capacity <= 0:
            raise ValueError(f"node {self.name}: capacities must be positive")
        if self.role not in ("worker", "control-plane"):
            raise ValueError(f"node {self.name}: unknown role {self.role!r}")


@dataclass(frozen=True)
class DeploymentState:
    name: str
    namespace: str
    node: str
    replicas: int
    cpu_demand: float
    mem_demand: float
    base_latency: float
    cpu_limit: float | None = None
    mem_limit: float | None = None
    # last observation; None before the first tick
    cpu_usage: float | None = None
    mem_usage: float | None = None
    latency: float | None = None

    def __post_init__(self) -> None:
        if self.replicas < 1:
            raise ValueError(f"{self.name}: replicas must be >= 1")
        if self.cpu_demand <= 0 or self.mem_demand <= 0 or self.base_latency <= 0:
            raise ValueError(f"{self.name}: demands and base latency must be positive")
        for lim in (self.cpu_limit, self.mem_limit):
            if lim is not None and lim <= 0:
                raise ValueError(f"{self.name}: limits must be positive")

    @property
    def total_cpu_demand(self) -> float:
        return self.cpu_demand * self.replicas

    @property
    def total_mem_demand(self) -> float:
        return self.mem_demand * self.replicas

    @property
    def effective_cpu(self) -> float:
        """Per-replica CPU in use: last observation, else the noise-free value."""
        if self.cpu_usage is not None:
            return self.cpu_usage
        return self.cpu_demand if self.cpu_limit is None else min(self.cpu_demand, self.cpu_limit)


@dataclass(frozen=True)
class SimConfig:
    noise_epsilon: float = 0.02
    oom_penalty: float = 3.0
    migration_penalty: float = 1.5

    def __post_init__(self) -> None:
        if not 0 <= self.noise_epsilon < 1:
            raise ValueError("noise_epsilon must lie in [0, 1)")
        if self.oom_penalty < 1 or self.migration_penalty < 1:
            raise ValueError("penalties are latency multipliers >= 1")


@dataclass(frozen=True)
class ClusterState:
    tick: int
    nodes: tuple[NodeSpec, ...]
    deployments: tuple[DeploymentState, ...]
    rng_seed: int = 0
    config: SimConfig = field(default_factory=SimConfig)
    pending_events: tuple[SimEvent, ...] = ()
    migrating: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate node names")
        seen: set[str] = set()
        for d in self.deployments:
            if d.name in seen:
                raise ValueError(f"duplicate deployment {d.name!r}")
            seen.add(d.name)
            if d.node not in names:
                raise ValueError(f"deployment {d.name!r} placed on unknown node {d.node!r}")

    @property
    def node_names(self) -> frozenset[str]:
        return frozenset(n.name for n in self.nodes)

    @property
    def deployment_names(self) -> frozenset[str]:
        return frozenset(d.name for d in self.deployments)

    @property
    def namespaces(self) -> frozenset[str]:
        return frozenset(d.namespace for d in self.deployments)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise UnknownNode(f"no node named {name!r}")

    def deployment(self, name: str) -> DeploymentState:
        for d in self.deployments:
            if d.name == name:
                return d
        raise UnknownDeployment(f"no deployment named {name!r}")

    def on_node(self, node: str) -> list[DeploymentState]:
        return [d for d in self.deployments if d.node == node]

    def _with(self, dep: DeploymentState, event: SimEvent, **extra: Any) -> ClusterState:
        deployments = tuple(dep if d.name == dep.name else d for d in self.deployments)
        return replace(self, deployments=deployments, pending_events=self.pending_events + (event,), **extra)


# -- scenario loading ---------------------------------------------------------


@dataclass(frozen=True)
class ScheduledAgent:
    at_tick: int
    spec: dict[str, Any]


@dataclass(frozen=True)
class Scenario:
    name: str
    nodes: tuple[NodeSpec, ...]
    deployments: tuple[DeploymentState, ...]
    agents: tuple[ScheduledAgent, ...] = ()
    sim: SimConfig = field(default_factory=SimConfig)

    def with_sim(self, **changes: Any) -> Scenario:
        return replace(self, sim=replace(self.sim, **changes))


def _require(obj: Mapping, key: str, path: str, kind: type | tuple[type, ...]) -> Any:
    if key not in obj:
        raise MalformedScenario(f"missing field {path}.{key}", field=f"{path}.{key}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise MalformedScenario(f"{path}.{key} has the wrong type", field=f"{path}.{key}")
    return value


_NUM = (int, float)


def parse_scenario(doc: Mapping[str, Any], name: str = "scenario") -> Scenario:
    if not isinstance(doc, Mapping):
        raise MalformedScenario("scenario must be an object", field="$")
    unknown = set(doc) - {"name", "nodes", "deployments", "agents", "sim"}
    if unknown:
        key = sorted(unknown)[0]
        raise MalformedScenario(f"unknown top-level field {key!r}", field=key)

    nodes = []
    for i, raw in enumerate(_require(doc, "nodes", "$", list)):
        path = f"nodes[{i}]"
        if not isinstance(raw, Mapping):
            raise MalformedScenario(f"{path} must be an object", field=path)
        try:
            nodes.append(
                NodeSpec(
                    name=_require(raw, "name", path, str),
                    cpu_capacity=float(_require(raw, "cpu_capacity", path, _NUM)),
                    mem_capacity=float(_require(raw, "mem_capacity", path, _NUM)),
                    role=raw.get("role", "worker"),
                )
            )
        except ValueError as exc:
            if isinstance(exc, MalformedScenario):
                raise
            raise MalformedScenario(str(exc), field=path) from None

    node_names = {n.name for n in nodes}
    deployments = []
    for i, raw in enumerate(doc.get("deployments", [])):
        path = f"deployments[{i}]"
        if not isinstance(raw, Mapping):
            raise MalformedScenario(f"{path} must be an object", field=path)
        node = _require(raw, "node", path, str)
        if node not in node_names:
            raise MalformedScenario(f"{path}.node refers to unknown node {node!r}", field=f"{path}.node")
        try:
            deployments.append(
                DeploymentState(
                    name=_require(raw, "name", path, str),
                    namespace=raw.get("namespace", "default"),
                    node=node,
                    replicas=int(raw.get("replicas", 1)),
                    cpu_demand=float(_require(raw, "cpu_demand", path, _NUM)),
                    mem_demand=float(_require(raw, "mem_demand", path, _NUM)),
                    base_latency=float(_require(raw, "base_latency", path, _NUM)),
                    cpu_limit=None if raw.get("cpu_limit") is None else float(raw["cpu_limit"]),
                    mem_limit=None if raw.get("mem_limit") is None else float(raw["mem_limit"]),
                )
            )
        except ValueError as exc:
            if isinstance(exc, MalformedScenario):
                raise
            raise MalformedScenario(str(exc), field=path) from None
    if len({d.name for d in deployments}) != len(deployments):
        raise MalformedScenario("deployment names must be unique", field="deployments")

    agents = []
    for i, raw in enumerate(doc.get("agents", [])):
        path = f"agents[{i}]"
        if not isinstance(raw, Mapping):
            raise MalformedScenario(f"{path} must be an object", field=path)
        at_tick = _require(raw, "at_tick", path, int)
        if at_tick < 0:
            raise MalformedScenario(f"{path}.at_tick must be >= 0", field=f"{path}.at_tick")
        agents.append(ScheduledAgent(at_tick, dict(_require(raw, "spec", path, Mapping))))

    sim_raw = doc.get("sim", {})
    if not isinstance(sim_raw, Mapping):
        raise MalformedScenario("sim must be an object", field="sim")
    try:
        sim = SimConfig(**{k: float(v) for k, v in sim_raw.items()})
    except (TypeError, ValueError) as exc:
        raise MalformedScenario(f"sim: {exc}", field="sim") from None

    return Scenario(doc.get("name", name), tuple(nodes), tuple(deployments), tuple(agents), sim)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedScenario(f"{path}: invalid JSON at line {exc.lineno}", field="$") from None
    return parse_scenario(doc, name=path.stem)


def init(scenario: Scenario | Mapping[str, Any], seed: int = 0) -> ClusterState:
    if not isinstance(scenario, Scenario):
        scenario = parse_scenario(scenario)
    return ClusterState(
        tick=0,
        nodes=scenario.nodes,
        deployments=scenario.deployments,
        rng_seed=seed,
        config=scenario.sim,
    )


# -- dynamics -----------------------------------------------------------------


def latency_model(base: float, cpu_demand: float, cpu_limit: float | None) -> float:
    """Throttled latency: work that wants ``cpu_demand`` cores squeezed into
    ``cpu_limit`` takes proportionally longer."""
    if cpu_limit is None:
        return base
    return base * max(1.0, cpu_demand / cpu_limit)


def _noise(seed: int, tick: int, name: str, eps: float) -> tuple[float, float]:
    if eps == 0:
        return 1.0, 1.0
    rng = np.random.default_rng([seed, tick, zlib.crc32(name.encode())])
    cpu, mem = rng.uniform(1.0 - eps, 1.0 + eps, size=2)
    return float(cpu), float(mem)


def tick(state: ClusterState) -> tuple[ClusterState, list[SimEvent], list[MetricsSample]]:
    now = state.tick + 1
    cfg = state.config
    events = list(state.pending_events)
    samples = []
    deployments = []
    for d in state.deployments:
        n_cpu, n_mem = _noise(state.rng_seed, now, d.name, cfg.noise_epsilon)
        demand = d.cpu_demand * n_cpu
        usage = demand if d.cpu_limit is None else min(demand, d.cpu_limit)
        mem = d.mem_demand * n_mem
        latency = latency_model(d.base_latency, demand, d.cpu_limit)
        if d.mem_limit is not None and mem > d.mem_limit:
            events.append(SimEvent(now, EventKind.OOM_KILL, d.name, f"mem {mem:.0f} > limit {d.mem_limit:.0f}"))
            latency *= cfg.oom_penalty
        if d.name in state.migrating:
            latency *= cfg.migration_penalty
        deployments.append(replace(d, cpu_usage=usage, mem_usage=mem, latency=latency))
        samples.append(MetricsSample(now, d.name, usage, mem, latency, d.cpu_limit, d.mem_limit, d.replicas))
    new_state = replace(state, tick=now, deployments=tuple(deployments), pending_events=(), migrating=frozenset())
    return new_state, events, samples


def apply_limit(
    state: ClusterState,
    deployment: str,
    cpu_limit: float | None = UNCHANGED,
    mem_limit: float | None = UNCHANGED,
) -> ClusterState:
    """Replace limits on a deployment. Pass ``None`` to clear a limit; omit an
    argument to keep the current value."""
    dep = state.deployment(deployment)
    cpu = dep.cpu_limit if cpu_limit is UNCHANGED else cpu_limit
    mem = dep.mem_limit if mem_limit is UNCHANGED else mem_limit
    event = SimEvent(state.tick + 1, EventKind.LIMIT_APPLIED, deployment, f"cpu_limit={cpu} mem_limit={mem}")
    return state._with(replace(dep, cpu_limit=cpu, mem_limit=mem), event)


def residual_cpu(state: ClusterState, node: str, *, exclude: str | None = None) -> float:
    cap = state.node(node).cpu_capacity
    return cap - sum(d.total_cpu_demand for d in state.on_node(node) if d.name != exclude)


def migrate(state: ClusterState, deployment: str, to_node: str) -> ClusterState:
    dep = state.deployment(deployment)
    state.node(to_node)
    if to_node != dep.node:
        free = residual_cpu(state, to_node)
        if free < dep.total_cpu_demand:
            raise InsufficientCapacity(
                f"{to_node} has {free:.3f} free cores, {deployment} needs {dep.total_cpu_demand:.3f}"
            )
    event = SimEvent(state.tick + 1, EventKind.MIGRATED, deployment, f"{dep.node} -> {to_node}")
    return state._with(replace(dep, node=to_node), event, migrating=state.migrating | {deployment})


def scale(state: ClusterState, deployment: str, delta: int) -> ClusterState:
    if delta not in (-1, 1):
        raise ValueError("delta must be -1 or +1")
    dep = state.deployment(deployment)
    replicas = dep.replicas + delta
    if replicas < 1:
        raise ScaleBelowOne(f"{deployment} already has a single replica")
    cpu = dep.total_cpu_demand / replicas
    mem = dep.total_mem_demand / replicas
    event = SimEvent(state.tick + 1, EventKind.SCALED, deployment, f"replicas {dep.replicas} -> {replicas}")
    return state._with(replace(dep, replicas=replicas, cpu_demand=cpu, mem_demand=mem), event)


def node_utilization(state: ClusterState, node: str) -> float:
    cap = state.node(node).cpu_capacity
    return sum(d.effective_cpu * d.replicas for d in state.on_node(node)) / cap


def node_cpu_reserved(state: ClusterState, node: str) -> float:
    """Fraction of node CPU claimed by limits; unlimited deployments claim their demand."""
    cap = state.node(node).cpu_capacity
    total = 0.0
    for d in state.on_node(node):
        total += (d.cpu_limit if d.cpu_limit is not None else d.cpu_demand) * d.replicas
    return total / cap


def node_mem_reserved(state: ClusterState, node: str) -> float:
    cap = state.node(node).mem_capacity
    total = 0.0
    for d in state.on_node(node):
        total += (d.mem_limit if d.mem_limit is not None else d.mem_demand) * d.replicas
    return total / cap

