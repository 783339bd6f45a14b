"""The scenario harness: simulator, controller, watcher and decision engine in
one deterministic loop.

Each tick the simulator advances, samples land in the metrics store, scheduled
agent specs are submitted to the controller over a loopback HTTP listener, and
on reconcile ticks the watcher runs. Escalated agents are handed to the
decision engine; the chosen action is applied and its outcome scored once a
full window has elapsed, with negative outcomes fed back as corrections.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from carm import sim
from carm.client import ApiError, Client
from carm.controller import AgentStore
from carm.drl.env import bootstrap_meta
from carm.drl.features import Action, DrlState, featurize
from carm.drl.registry import ModelRegistry, load_registry
from carm.drl.reward import Outcome, reward
from carm.errors import CarmError, InsufficientCapacity
from carm.metrics import MetricsStore
from carm.server import ApiServer, optimize, record_feedback
from carm.spec import AgentSpec, AgentStatus
from carm.watcher import DrlRequest, Watcher, WatcherConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    ticks: int = 60
    watcher: WatcherConfig = field(default_factory=WatcherConfig)
    registry_path: Path | None = None
    meta_seed: int = 0
    meta_episodes: int = 800


@dataclass(frozen=True)
class ConflictEntry:
    tick: int
    agent_id: str
    conflict: str
    targets: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"tick": self.tick, "agent": self.agent_id, "conflict": self.conflict, "targets": list(self.targets)}


@dataclass
class ResolutionEntry:
    tick: int
    agent_id: str
    conflict: str
    action: str
    q_values: tuple[float, ...]
    targets: tuple[str, ...]
    applied: bool
    note: str = ""
    # filled in once the evaluation window has elapsed
    rewards: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "agent": self.agent_id,
            "conflict": self.conflict,
            "action": self.action,
            "q_values": [round(q, 12) for q in self.q_values],
            "targets": list(self.targets),
            "applied": self.applied,
            "note": self.note,
            "rewards": dict(sorted(self.rewards.items())),
        }


@dataclass
class _Evaluation:
    due: int
    entry: ResolutionEntry
    action: Action
    states: dict[str, DrlState]
    baselines: dict[str, float]
    alloc_before: dict[str, float]


@dataclass
class RunResult:
    scenario: sim.Scenario
    config: RunConfig
    initial: sim.ClusterState
    final: sim.ClusterState
    metrics: MetricsStore
    events: list[sim.SimEvent]
    utilization: list[tuple[int, str, float]]
    agents: dict[str, object]
    conflicts: list[ConflictEntry]
    resolutions: list[ResolutionEntry]
    rejected: list[dict]
    registry: ModelRegistry | None = None

    @property
    def unresolved(self) -> list[str]:
        return sorted(a for a, e in self.agents.items() if e.spec.status is AgentStatus.ESCALATED)

    @property
    def exit_code(self) -> int:
        return 1 if self.unresolved else 0


class Harness:
    def __init__(
        self, scenario: sim.Scenario, config: RunConfig = RunConfig(), registry: ModelRegistry | None = None
    ) -> None:
        self.scenario = scenario
        self.config = config
        self.state = sim.init(scenario, config.seed)
        self.metrics = MetricsStore()
        self.store = AgentStore(clock=lambda: self.state.tick, cluster=lambda: self.state)
        self.watcher = Watcher(config.watcher)
        self._registry = registry
        self._requests: dict[str, DrlRequest] = {}
        self._failed: dict[str, set[Action]] = {}
        self._pending: list[_Evaluation] = []
        self.events: list[sim.SimEvent] = []
        self.utilization: list[tuple[int, str, float]] = []
        self.conflicts: list[ConflictEntry] = []
        self.resolutions: list[ResolutionEntry] = []
        self.rejected: list[dict] = []
        self._since_cycle: list[sim.SimEvent] = []
        self._client: Client | None = None

    @property
    def registry(self) -> ModelRegistry:
        if self._registry is None:
            if self.config.registry_path is not None and (self.config.registry_path / "manifest.json").exists():
                self._registry = load_registry(self.config.registry_path)
            else:
                log.info("bootstrapping meta model (%d episodes)", self.config.meta_episodes)
                meta = bootstrap_meta(self.config.meta_seed, self.config.meta_episodes)
                self._registry = ModelRegistry(meta, storage_path=self.config.registry_path)
        return self._registry

    def step(self) -> int:
        """Advance one tick and run everything scheduled for it."""
        self.state, events, samples = sim.tick(self.state)
        t = self.state.tick
        for s in samples:
            self.metrics.record(s)
        self.events += events
        self._since_cycle += events
        for node in self.state.nodes:
            self.utilization.append((t, node.name, sim.node_utilization(self.state, node.name)))
        self._evaluate_due(t)
        for scheduled in self.scenario.agents:
            if scheduled.at_tick == t:
                self._submit(scheduled.spec, t)
        if self.watcher.due(t):
            self._cycle(self._since_cycle)
            self._since_cycle = []
        return t

    def run(self) -> RunResult:
        initial = self.state
        with ApiServer(self.store) as server:
            self._client = Client(server.address)
            for _ in range(self.config.ticks):
                self.step()
            self._client = None
        if self._registry is not None and self.config.registry_path is not None:
            self._registry.save(self.config.registry_path)
        return RunResult(
            scenario=self.scenario,
            config=self.config,
            initial=initial,
            final=self.state,
            metrics=self.metrics,
            events=self.events,
            utilization=self.utilization,
            agents=self.store.snapshot(),
            conflicts=self.conflicts,
            resolutions=self.resolutions,
            rejected=self.rejected,
            registry=self._registry,
        )

    def _submit(self, spec: dict, tick: int) -> None:
        try:
            if self._client is not None:
                agent_id = self._client.create_agent(spec)
            else:
                agent_id = self.store.create(spec)
            log.info("tick %d: submitted %s", tick, agent_id)
        except ApiError as exc:
            log.warning("tick %d: spec rejected: %s", tick, exc)
            self.rejected.append({"tick": tick, "status": exc.status, **exc.body})
        except CarmError as exc:
            log.warning("tick %d: spec rejected: %s", tick, exc)
            self.rejected.append({"tick": tick, "status": exc.status, **exc.to_dict()})

    # -- reconcile cycle -----------------------------------------------------

    def _cycle(self, events: list[sim.SimEvent]) -> None:
        seen = self.store.snapshot()
        agents = [e.spec for e in sorted(seen.values(), key=lambda e: (e.spec.created_at, e.spec.id))]
        before = {a.id: a.status for a in agents}
        self.state, updated, reports = self.watcher.reconcile_once(agents, self.state, self.metrics, events)
        written = set(self.store.commit(updated, seen))
        t = self.state.tick
        for agent in updated:
            if agent.id in written and agent.status is AgentStatus.CONFLICTING and before[agent.id] is not AgentStatus.CONFLICTING:
                track = self.watcher.track(agent.id)
                self.conflicts.append(ConflictEntry(t, agent.id, track.conflict.value, track.conflicted_targets))
        for r in reports:
            if r.escalated and r.agent_id in written:
                self._requests[r.agent_id] = r.request
                self._failed[r.agent_id] = set()
        for entry in self.store.list(status=AgentStatus.ESCALATED):
            if entry.spec.id in self._requests:
                self._resolve(entry.spec)

    def _decide(self, request: DrlRequest, excluded: set[Action]) -> tuple[Action, np.ndarray, dict[str, DrlState]]:
        """Average the q-values of each target's model, then pick greedily
        among actions that have not already failed for this escalation."""
        qs, states = [], {}
        for p in request.payloads:
            body = {"deployment": p.deployment, "before": p.before.to_dict(), "after": p.after.to_dict()}
            answer = optimize(self.registry, body)
            qs.append(answer["q_values"])
            model = self.registry.select_model(p.deployment)
            states[p.deployment] = featurize(p.before, p.after, model.scales)
        q = np.mean(np.asarray(qs, dtype=float), axis=0)
        masked = q.copy()
        for a in excluded:
            masked[int(a)] = -np.inf
        return Action(int(np.argmax(masked))), q, states

    def _resolve(self, agent: AgentSpec) -> None:
        request = self._requests[agent.id]
        excluded = self._failed[agent.id]
        t = self.state.tick
        action, q, states = self._decide(request, excluded)
        targets = tuple(p.deployment for p in request.payloads)
        entry = ResolutionEntry(t, agent.id, request.conflict.value, action.name.lower(), tuple(float(v) for v in q), targets, False)
        self.resolutions.append(entry)
        try:
            self.state, resolved = self.watcher.apply_resolution(agent, action, self.state)
        except InsufficientCapacity as exc:
            excluded.add(action)
            entry.note = str(exc)
            return
        seen = self.store.snapshot()
        if not self.store.commit([resolved], seen):
            entry.note = "agent changed by controller; resolution not recorded"
            return
        entry.applied = True
        del self._requests[agent.id]
        window = self.config.watcher.baseline_window
        self._pending.append(
            _Evaluation(
                due=t + window,
                entry=entry,
                action=action,
                states=states,
                baselines={p.deployment: p.before.latency for p in request.payloads},
                alloc_before={p.deployment: p.after.total_cpu_alloc for p in request.payloads},
            )
        )

    def _evaluate_due(self, t: int) -> None:
        keep = []
        for ev in self._pending:
            if ev.due > t:
                keep.append(ev)
                continue
            lo = ev.entry.tick + 1
            for dep, state in sorted(ev.states.items()):
                samples = self.metrics.samples_in(dep, (lo, t))
                ooms = sum(1 for e in self.events if e.kind is sim.EventKind.OOM_KILL and e.deployment == dep and lo <= e.tick <= t)
                r = reward(Outcome(samples, ev.baselines[dep], ev.alloc_before[dep], ooms, self.config.watcher.latency_degradation_factor))
                ev.entry.rewards[dep] = r
                log.info("tick %d: %s on %s scored %+d", t, ev.action.name, dep, r)
                if r < 0:
                    record_feedback(
                        self.registry,
                        {"deployment": dep, "state": list(state.values), "action": int(ev.action), "reward": r, "tick": t},
                    )
        self._pending = keep


class LiveLoop(Harness):
    """Service mode: advance the simulation in wall-clock time while agents
    arrive through an externally owned API server sharing ``store``."""

    def __init__(self, scenario: sim.Scenario, watcher: WatcherConfig, registry: ModelRegistry, seed: int = 0) -> None:
        super().__init__(scenario, RunConfig(seed=seed, ticks=0, watcher=watcher), registry)

    def run(self, stop: threading.Event, tick_seconds: float = 1.0) -> None:  # type: ignore[override]
        while not stop.wait(tick_seconds):
            try:
                self.step()
            except Exception:  # noqa: BLE001 - keep the service alive
                log.exception("tick %d failed", self.state.tick)


def run(scenario: sim.Scenario | str | Path, config: RunConfig = RunConfig()) -> RunResult:
    if not isinstance(scenario, sim.Scenario):
        scenario = sim.load_scenario(scenario)
    return Harness(scenario, config).run()
