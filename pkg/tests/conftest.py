from __future__ import annotations

import os
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, settings

from carm import sim
from carm.metrics import MetricsStore
from carm.report import bundled_scenario
from carm.spec import AgentSpec, validate_spec
from carm.watcher import Watcher, WatcherConfig

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def two_node_cluster(eps: float = 0.0, **deps) -> sim.ClusterState:
    """worker-1 hosts ``api`` and ``cache``; worker-2 is empty."""
    nodes = (sim.NodeSpec("worker-1", 4.0, 8e9), sim.NodeSpec("worker-2", 4.0, 8e9))
    base = {
        "api": sim.DeploymentState("api", "web", "worker-1", 1, 1.0, 1e9, 10.0),
        "cache": sim.DeploymentState("cache", "web", "worker-1", 1, 0.5, 2e9, 4.0),
    }
    for name, changes in deps.items():
        base[name] = replace(base[name], **changes)
    return sim.ClusterState(0, nodes, tuple(base.values()), rng_seed=0, config=sim.SimConfig(noise_epsilon=eps))


class Driver:
    """Sim, metrics store and watcher wired together without the HTTP layer."""

    def __init__(self, cluster: sim.ClusterState, config: WatcherConfig = WatcherConfig()) -> None:
        self.cluster = cluster
        self.metrics = MetricsStore()
        self.watcher = Watcher(config)
        self.agents: list[AgentSpec] = []
        self.events: list[sim.SimEvent] = []
        self.reports = []
        self._since: list[sim.SimEvent] = []

    def add(self, doc: dict) -> str:
        agent_id = f"agent-{len(self.agents) + 1:04d}"
        self.agents.append(validate_spec(doc, agent_id=agent_id, created_at=self.cluster.tick, cluster=self.cluster))
        return agent_id

    def tick(self) -> None:
        self.cluster, events, samples = sim.tick(self.cluster)
        for s in samples:
            self.metrics.record(s)
        self.events += events
        self._since += events
        if self.watcher.due(self.cluster.tick):
            self.cluster, self.agents, reports = self.watcher.reconcile_once(
                self.agents, self.cluster, self.metrics, self._since
            )
            self.reports.append(reports)
            self._since = []

    def run(self, n: int) -> None:
        for _ in range(n):
            self.tick()

    def agent(self, agent_id: str) -> AgentSpec:
        return next(a for a in self.agents if a.id == agent_id)


@pytest.fixture
def reference_scenario() -> sim.Scenario:
    return bundled_scenario("reference-worker1")


@pytest.fixture
def cluster() -> sim.ClusterState:
    return two_node_cluster()


@pytest.fixture(scope="session")
def shared_meta():
    from carm.drl.env import bootstrap_meta

    return bootstrap_meta()


_acceptance: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.module.__name__.endswith("test_acceptance"):
        doc = (item.function.__doc__ or "").strip().splitlines()
        _acceptance.append((item.name, doc[0] if doc else "", "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, title, verdict in _acceptance:
        terminalreporter.write_line(f"{verdict}  {name}  {title}")
