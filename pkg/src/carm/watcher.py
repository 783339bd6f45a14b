"""Reconciliation loop: enforce agents, detect conflicts, escalate.

The watcher owns the Active, Conflicting, Escalated and Resolved statuses.
Per agent it remembers the pre-enforcement baseline of every target. The
baseline is frozen the first time any agent enforces a target, so a quota is
always relative to unconstrained usage and never compounds.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace

from carm import sim
from carm.drl.env import least_utilized_node
from carm.drl.features import Action, Aggregate
from carm.errors import (
    CarmError,
    InsufficientCapacity,
    NoBaseline,
    PreconditionViolation,
    ScaleBelowOne,
)
from carm.metrics import MetricsStore
from carm.spec import AgentSpec, AgentStatus, ConflictClass, scope_targets

log = logging.getLogger(__name__)

CPU, MEM = "cpu", "mem"


@dataclass(frozen=True)
class WatcherConfig:
    interval_ticks: int = 1
    spec_conflict_threshold: int = 3
    latency_degradation_factor: float = 1.30
    baseline_window: int = 5
    tolerance: float = 0.01

    def __post_init__(self) -> None:
        if self.interval_ticks < 1 or self.spec_conflict_threshold < 1 or self.baseline_window < 1:
            raise ValueError("interval, threshold and baseline window must be positive")
        if self.latency_degradation_factor <= 1:
            raise ValueError("latency_degradation_factor must exceed 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")


@dataclass(frozen=True)
class Limits:
    cpu: float | None
    mem: float | None


@dataclass(frozen=True)
class DrlPayload:
    deployment: str
    before: Aggregate
    after: Aggregate

    def to_dict(self) -> dict:
        return {"deployment": self.deployment, "before": self.before.to_dict(), "after": self.after.to_dict()}


@dataclass(frozen=True)
class DrlRequest:
    agent_id: str
    tick: int
    conflict: ConflictClass
    payloads: tuple[DrlPayload, ...]


@dataclass(frozen=True)
class ReconcileReport:
    tick: int
    agent_id: str
    enforced_targets: tuple[str, ...] = ()
    reapplied_targets: tuple[str, ...] = ()
    conflict: ConflictClass = ConflictClass.NONE
    escalated: bool = False
    request: DrlRequest | None = None
    note: str = ""

    def __post_init__(self) -> None:
        if self.escalated and self.conflict is ConflictClass.NONE:
            raise ValueError("an escalated report must carry a conflict class")


def baseline_from(metrics: MetricsStore, deployment: str, tick: int, window: int) -> Aggregate:
    samples = metrics.samples_in(deployment, (max(0, tick - window + 1), tick))
    if not samples:
        raise NoBaseline(f"no samples for {deployment} at or before tick {tick}")
    return Aggregate.from_samples(samples)


def limits_for(agent: AgentSpec, baseline: Aggregate) -> Limits:
    """Per-replica limits an agent wants given the frozen baseline usage."""
    q = agent.quota
    cpu = mem = None
    if q.cpu_factor is not None:
        cpu = baseline.cpu_usage * q.cpu_factor
        if q.cpu_cap is not None:
            cpu = min(cpu, q.cpu_cap)
    if q.mem_factor is not None:
        mem = baseline.mem_usage * q.mem_factor
        if q.mem_cap is not None:
            mem = min(mem, q.mem_cap)
    return Limits(cpu, mem)


def intended_limits(agent: AgentSpec, deployment: str, metrics: MetricsStore, tick: int, window: int = 5) -> Limits:
    """Limits computed from the ``window`` samples ending at ``tick``."""
    return limits_for(agent, baseline_from(metrics, deployment, tick, window))


def _within(actual: float | None, intended: float, tolerance: float) -> bool:
    return actual is not None and abs(actual - intended) <= tolerance * intended


def check_enforced(
    intended: Limits,
    dep: sim.DeploymentState,
    tolerance: float,
    skip: Iterable[str] = (),
) -> bool:
    """True when every managed, non-skipped dimension matches within ``tolerance``
    relative deviation (closed interval)."""
    skip = set(skip)
    if intended.cpu is not None and CPU not in skip and not _within(dep.cpu_limit, intended.cpu, tolerance):
        return False
    if intended.mem is not None and MEM not in skip and not _within(dep.mem_limit, intended.mem, tolerance):
        return False
    return True


@dataclass
class _Track:
    """Watcher-private bookkeeping for one agent."""

    baselines: dict[str, Aggregate] = field(default_factory=dict)
    enforced_at: int = 0
    conflict: ConflictClass = ConflictClass.NONE
    conflict_cycles: int = 0
    conflicted_targets: tuple[str, ...] = ()
    # (deployment, dimension) -> id of the agent this one yields to
    yielded: dict[tuple[str, str], str] = field(default_factory=dict)

    def reset_conflict(self) -> None:
        self.conflict = ConflictClass.NONE
        self.conflict_cycles = 0
        self.conflicted_targets = ()
        self.yielded = {}


class Watcher:
    def __init__(self, config: WatcherConfig = WatcherConfig()) -> None:
        self.config = config
        self._tracks: dict[str, _Track] = {}
        # first baseline seen per deployment, taken before any agent limited it;
        # later agents reuse it so one agent's cut never feeds another's quota
        self._unconstrained: dict[str, Aggregate] = {}
        self._last_cycle = -1

    def track(self, agent_id: str) -> _Track:
        return self._tracks.setdefault(agent_id, _Track())

    def conflict_of(self, agent_id: str) -> ConflictClass:
        t = self._tracks.get(agent_id)
        return ConflictClass.NONE if t is None else t.conflict

    def forget(self, agent_id: str) -> None:
        self._tracks.pop(agent_id, None)

    def intended(self, agent: AgentSpec, deployment: str) -> Limits:
        return limits_for(agent, self.track(agent.id).baselines[deployment])

    def due(self, tick: int) -> bool:
        return tick % self.config.interval_ticks == 0

    # -- the cycle ------------------------------------------------------------

    def _enforce(self, agent: AgentSpec, deployment: str, cluster: sim.ClusterState) -> sim.ClusterState:
        lim = self.intended(agent, deployment)
        yielded = self.track(agent.id).yielded
        kwargs = {}
        if lim.cpu is not None and (deployment, CPU) not in yielded:
            kwargs["cpu_limit"] = lim.cpu
        if lim.mem is not None and (deployment, MEM) not in yielded:
            kwargs["mem_limit"] = lim.mem
        return sim.apply_limit(cluster, deployment, **kwargs) if kwargs else cluster

    def _freeze_baselines(self, agent: AgentSpec, targets: Iterable[str], metrics: MetricsStore, tick: int) -> list[str]:
        """Freeze baselines for targets seen for the first time; returns them."""
        track = self.track(agent.id)
        fresh = []
        for dep in sorted(targets):
            if dep not in track.baselines:
                if dep not in self._unconstrained:
                    self._unconstrained[dep] = baseline_from(metrics, dep, tick, self.config.baseline_window)
                track.baselines[dep] = self._unconstrained[dep]
                fresh.append(dep)
        return fresh

    def _failing(self, agent: AgentSpec, targets: Iterable[str], cluster: sim.ClusterState) -> list[str]:
        track = self.track(agent.id)
        out = []
        for dep in sorted(targets):
            skip = [dim for d, dim in track.yielded if d == dep]
            if not check_enforced(self.intended(agent, dep), cluster.deployment(dep), self.config.tolerance, skip):
                out.append(dep)
        return out

    def _degraded(self, agent: AgentSpec, targets: Iterable[str], metrics: MetricsStore, tick: int, ooms: set[str]) -> list[str]:
        track = self.track(agent.id)
        lo = max(track.enforced_at + 1, tick - self.config.baseline_window + 1)
        bad = []
        for dep in sorted(targets):
            if dep in ooms:
                bad.append(dep)
                continue
            if lo > tick:
                continue
            avg = metrics.window_avg(dep, "latency", (lo, tick))
            if avg is not None and avg > self.config.latency_degradation_factor * track.baselines[dep].latency:
                bad.append(dep)
        return bad

    def reconcile_once(
        self,
        agents: Sequence[AgentSpec],
        cluster: sim.ClusterState,
        metrics: MetricsStore,
        events: Iterable[sim.SimEvent] = (),
    ) -> tuple[sim.ClusterState, list[AgentSpec], list[ReconcileReport]]:
        """One pass over all agents in creation order.

        ``events`` are simulator events since the previous cycle; OomKill events
        among them mark optimization conflicts.
        """
        tick = cluster.tick
        cfg = self.config
        ooms = {e.deployment for e in events if e.kind is sim.EventKind.OOM_KILL and e.tick > self._last_cycle}
        self._last_cycle = tick
        live = {a.id for a in agents if a.status is not AgentStatus.DELETED}
        for agent_id in list(self._tracks):
            if agent_id not in live:
                del self._tracks[agent_id]
        for track in self._tracks.values():
            track.yielded = {k: w for k, w in track.yielded.items() if w in live}
        out: dict[str, AgentSpec] = {a.id: a for a in agents}
        reports: list[ReconcileReport] = []
        newly_spec_conflicted: list[AgentSpec] = []

        for agent in sorted(agents, key=lambda a: (a.created_at, a.id)):
            if agent.status in (AgentStatus.DELETED, AgentStatus.ESCALATED):
                continue
            try:
                targets = scope_targets(agent, cluster)
            except CarmError as exc:
                reports.append(ReconcileReport(tick, agent.id, note=f"{exc.code}: {exc}"))
                continue
            track = self.track(agent.id)

            if agent.status is AgentStatus.RESOLVED:
                agent = agent.transition(AgentStatus.ACTIVE)
                track.reset_conflict()

            if agent.status is AgentStatus.PENDING:
                try:
                    self._freeze_baselines(agent, targets, metrics, tick)
                except NoBaseline as exc:
                    reports.append(ReconcileReport(tick, agent.id, note=f"NoBaseline: {exc}"))
                    out[agent.id] = agent
                    continue
                for dep in sorted(targets):
                    cluster = self._enforce(agent, dep, cluster)
                track.enforced_at = tick
                agent = replace(agent.transition(AgentStatus.ACTIVE), last_applied_at=tick, restart_count=0)
                out[agent.id] = agent
                reports.append(ReconcileReport(tick, agent.id, enforced_targets=tuple(sorted(targets))))
                continue

            # Active or Conflicting
            try:
                fresh = self._freeze_baselines(agent, targets, metrics, tick)
            except NoBaseline as exc:
                reports.append(ReconcileReport(tick, agent.id, note=f"NoBaseline: {exc}"))
                out[agent.id] = agent
                continue
            for dep in fresh:
                cluster = self._enforce(agent, dep, cluster)
            failing = [d for d in self._failing(agent, targets, cluster) if d not in fresh]
            for dep in failing:
                cluster = self._enforce(agent, dep, cluster)
            if failing:
                agent = replace(agent, restart_count=agent.restart_count + 1, last_applied_at=tick)
            elif agent.status is AgentStatus.ACTIVE:
                agent = replace(agent, restart_count=0)
            degraded = self._degraded(agent, targets, metrics, tick, ooms)

            conflict = ConflictClass.NONE
            escalated = False
            request = None
            if agent.status is AgentStatus.ACTIVE:
                if agent.restart_count >= cfg.spec_conflict_threshold:
                    conflict = ConflictClass.SPECIFICATION
                    track.conflicted_targets = tuple(failing)
                    newly_spec_conflicted.append(agent)
                elif degraded:
                    conflict = ConflictClass.OPTIMIZATION
                    track.conflicted_targets = tuple(degraded)
                if conflict is not ConflictClass.NONE:
                    agent = agent.transition(AgentStatus.CONFLICTING)
                    track.conflict = conflict
                    track.conflict_cycles = 0
            else:
                conflict = track.conflict
                track.conflict_cycles += 1
                still = bool(failing) if conflict is ConflictClass.SPECIFICATION else bool(degraded)
                if still:
                    if conflict is ConflictClass.OPTIMIZATION:
                        track.conflicted_targets = tuple(degraded)
                    else:
                        track.conflicted_targets = tuple(failing)
                    request = self.escalate(agent, metrics, tick)
                    agent = agent.transition(AgentStatus.ESCALATED)
                    escalated = True

            out[agent.id] = agent
            reports.append(
                ReconcileReport(
                    tick,
                    agent.id,
                    reapplied_targets=tuple(failing),
                    conflict=conflict,
                    escalated=escalated,
                    request=request,
                )
            )

        if newly_spec_conflicted:
            cluster = self._latest_wins(list(out.values()), cluster)
        return cluster, [out[a.id] for a in agents], reports

    def _latest_wins(self, agents: list[AgentSpec], cluster: sim.ClusterState) -> sim.ClusterState:
        """Settle contested (deployment, dimension) pairs that involve a
        specification-conflicting agent: the most recently created claimant
        keeps enforcing, the others stop enforcing that pair."""
        live = [a for a in agents if a.status not in (AgentStatus.DELETED, AgentStatus.ESCALATED, AgentStatus.PENDING)]
        claims: dict[tuple[str, str], list[AgentSpec]] = {}
        for a in live:
            for dep in scope_targets(a, cluster):
                if a.quota.manages_cpu:
                    claims.setdefault((dep, CPU), []).append(a)
                if a.quota.manages_mem:
                    claims.setdefault((dep, MEM), []).append(a)
        for (dep, dim), claimants in sorted(claims.items()):
            spec_conflicted = any(
                a.status is AgentStatus.CONFLICTING and self.conflict_of(a.id) is ConflictClass.SPECIFICATION
                for a in claimants
            )
            if len(claimants) < 2 or not spec_conflicted:
                continue
            winner = max(claimants, key=lambda a: (a.created_at, a.id))
            for a in claimants:
                if a is not winner:
                    self.track(a.id).yielded[(dep, dim)] = winner.id
            lim = self.intended(winner, dep)
            value = lim.cpu if dim == CPU else lim.mem
            cluster = sim.apply_limit(cluster, dep, **{f"{dim}_limit": value})
        return cluster

    # -- escalation and resolution -------------------------------------------

    def escalate(self, agent: AgentSpec, metrics: MetricsStore, tick: int | None = None) -> DrlRequest:
        """Before/after payload for each conflicted target. ``before`` is the
        frozen baseline, ``after`` the most recent window since enforcement."""
        if agent.status is not AgentStatus.CONFLICTING:
            raise PreconditionViolation(f"{agent.id} is {agent.status.value}, not conflicting")
        track = self.track(agent.id)
        payloads = []
        for dep in track.conflicted_targets:
            if dep not in track.baselines:
                raise NoBaseline(f"no frozen baseline for {dep}")
            last = metrics.last_tick(dep) if tick is None else tick
            if last is None:
                raise NoBaseline(f"no samples for {dep}")
            # only samples taken under the current specification count as "after"
            span = min(self.config.baseline_window, max(1, last - track.enforced_at))
            after = baseline_from(metrics, dep, last, span)
            payloads.append(DrlPayload(dep, track.baselines[dep], after))
        return DrlRequest(agent.id, tick if tick is not None else -1, track.conflict, tuple(payloads))

    def apply_resolution(
        self, agent: AgentSpec, action: Action, cluster: sim.ClusterState
    ) -> tuple[sim.ClusterState, AgentSpec]:
        """Carry out a decision on the agent's conflicted targets.

        Raises InsufficientCapacity, leaving the agent Escalated, when no
        target could be migrated anywhere.
        """
        if agent.status is not AgentStatus.ESCALATED:
            raise PreconditionViolation(f"{agent.id} is {agent.status.value}, not escalated")
        targets = self.track(agent.id).conflicted_targets
        if action is Action.MIGRATE:
            moved = 0
            for dep in targets:
                dest = least_utilized_node(cluster, dep)
                if dest is None:
                    log.info("no feasible node for %s", dep)
                    continue
                cluster = sim.migrate(cluster, dep, dest)
                moved += 1
            if targets and not moved:
                raise InsufficientCapacity(f"no feasible node for any target of {agent.id}")
        elif action in (Action.SCALE_DOWN, Action.SCALE_UP):
            delta = -1 if action is Action.SCALE_DOWN else 1
            for dep in targets:
                try:
                    cluster = sim.scale(cluster, dep, delta)
                except ScaleBelowOne:
                    log.info("%s already at one replica; skipped", dep)
        # degradation is judged from here on; a migrated pod gets its restart tick as grace
        self.track(agent.id).enforced_at = cluster.tick + (1 if action is Action.MIGRATE else 0)
        return cluster, agent.transition(AgentStatus.RESOLVED)
