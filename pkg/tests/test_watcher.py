import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from carm import sim
from carm.drl.features import Action
from carm.errors import InsufficientCapacity, PreconditionViolation
from carm.spec import AgentStatus, ConflictClass
from carm.watcher import Limits, WatcherConfig, check_enforced, limits_for
from conftest import Driver, two_node_cluster
from oracles import alternation

S = AgentStatus


def test_reference_node_agent_enforces_quota(reference_scenario):
    state = sim.init(reference_scenario.with_sim(noise_epsilon=0.0))
    d = Driver(state)
    d.run(10)
    agent_id = d.add({"scope": "node", "target": "worker-1", "cpu_factor": 0.85})
    d.run(1)
    assert d.agent(agent_id).status is S.ACTIVE
    got = {name: d.cluster.deployment(name).cpu_limit for name in ("cons-a", "cons-b", "cons-c")}
    assert got == pytest.approx({"cons-a": 0.799, "cons-b": 0.782, "cons-c": 0.85}, rel=1e-12)
    d.run(20)
    assert d.agent(agent_id).status is S.ACTIVE
    assert d.agent(agent_id).restart_count == 0
    # quota stays relative to the unconstrained baseline; it never compounds
    assert d.cluster.deployment("cons-a").cpu_limit == got["cons-a"]


def test_pending_without_samples_waits():
    d = Driver(two_node_cluster())
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.9})
    d.watcher.reconcile_once(d.agents, d.cluster, d.metrics)
    _, agents, reports = d.watcher.reconcile_once(d.agents, d.cluster, d.metrics)
    assert agents[0].status is S.PENDING
    assert reports[0].note.startswith("NoBaseline")
    d.run(1)
    assert d.agent(agent_id).status is S.ACTIVE


def test_drift_is_reapplied_and_counted_then_reset():
    d = Driver(two_node_cluster())
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.9})
    d.run(1)
    d.cluster = sim.apply_limit(d.cluster, "api", cpu_limit=2.0)
    d.run(1)
    assert d.agent(agent_id).restart_count == 1
    assert d.cluster.deployment("api").cpu_limit == pytest.approx(0.9)
    assert d.reports[-1][0].reapplied_targets == ("api",)
    d.run(1)
    assert d.agent(agent_id).restart_count == 0


def test_persistent_drift_becomes_a_specification_conflict_then_escalates():
    d = Driver(two_node_cluster())
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.9})
    d.run(1)
    statuses = []
    for _ in range(5):
        d.cluster = sim.apply_limit(d.cluster, "api", cpu_limit=2.0)
        d.run(1)
        statuses.append(d.agent(agent_id).status)
    assert statuses[:4] == [S.ACTIVE, S.ACTIVE, S.CONFLICTING, S.ESCALATED]
    report = d.reports[-2][0]
    assert report.escalated and report.conflict is ConflictClass.SPECIFICATION
    assert report.request.payloads[0].deployment == "api"
    # escalated agents are left alone
    assert statuses[4] is S.ESCALATED


def test_tolerance_is_a_closed_interval():
    # binary-exact numbers so the boundary is hit precisely
    at_edge = sim.DeploymentState("api", "web", "w", 1, 1.0, 1e9, 10.0, cpu_limit=4.25)
    assert check_enforced(Limits(4.0, None), at_edge, 0.0625)
    below = sim.DeploymentState("api", "web", "w", 1, 1.0, 1e9, 10.0, cpu_limit=3.75)
    assert check_enforced(Limits(4.0, None), below, 0.0625)
    past = sim.DeploymentState("api", "web", "w", 1, 1.0, 1e9, 10.0, cpu_limit=4.25 + 1e-9)
    assert not check_enforced(Limits(4.0, None), past, 0.0625)
    assert check_enforced(Limits(4.0, None), past, 0.0625, skip=["cpu"])
    assert not check_enforced(Limits(None, 5e8), past, 0.01)


def test_oom_leads_to_optimization_conflict_and_payload():
    d = Driver(two_node_cluster(0.02))
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "mem_factor": 0.6})
    d.run(1)
    assert d.agent(agent_id).status is S.ACTIVE
    d.run(1)
    assert d.agent(agent_id).status is S.CONFLICTING
    assert d.watcher.conflict_of(agent_id) is ConflictClass.OPTIMIZATION
    d.run(1)
    agent = d.agent(agent_id)
    assert agent.status is S.ESCALATED
    request = d.reports[-1][0].request
    assert request.conflict is ConflictClass.OPTIMIZATION
    (payload,) = request.payloads
    assert payload.before.mem_alloc == pytest.approx(payload.before.mem_usage)
    assert payload.after.mem_alloc == pytest.approx(0.6 * payload.before.mem_usage)
    assert payload.after.latency > 2 * payload.before.latency

    with pytest.raises(PreconditionViolation):
        d.watcher.escalate(agent, d.metrics)
    cluster, resolved = d.watcher.apply_resolution(agent, Action.SCALE_UP, d.cluster)
    assert resolved.status is S.RESOLVED and resolved.restart_count == 0
    assert cluster.deployment("api").replicas == 2
    d.cluster = cluster
    d.agents = [resolved if a.id == agent_id else a for a in d.agents]
    before = len(d.events)
    d.run(10)
    assert d.agent(agent_id).status is S.ACTIVE
    assert not [e for e in d.events[before:] if e.kind is sim.EventKind.OOM_KILL]


def test_latency_breach_is_an_optimization_conflict():
    d = Driver(two_node_cluster())
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.6})
    d.run(3)
    assert d.agent(agent_id).status is S.ESCALATED
    assert d.watcher.conflict_of(agent_id) is ConflictClass.OPTIMIZATION


def test_migration_without_room_raises_and_stays_escalated():
    d = Driver(two_node_cluster(api={"cpu_demand": 3.9}, cache={"node": "worker-2", "cpu_demand": 0.5}))
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.5})
    d.run(3)
    agent = d.agent(agent_id)
    assert agent.status is S.ESCALATED
    with pytest.raises(InsufficientCapacity):
        d.watcher.apply_resolution(agent, Action.MIGRATE, d.cluster)
    cluster, resolved = d.watcher.apply_resolution(agent, Action.OPTIMIZE, d.cluster)
    assert cluster == d.cluster and resolved.status is S.RESOLVED


def test_migration_moves_to_least_utilized_worker():
    nodes = (
        sim.NodeSpec("cp", 8.0, 3.2e10, role="control-plane"),
        sim.NodeSpec("w1", 4.0, 8e9),
        sim.NodeSpec("w2", 4.0, 8e9),
        sim.NodeSpec("w3", 4.0, 8e9),
    )
    deps = (
        sim.DeploymentState("api", "web", "w1", 1, 1.0, 1e9, 10.0),
        sim.DeploymentState("busy", "web", "w2", 1, 1.0, 1e9, 10.0),
    )
    d = Driver(sim.ClusterState(0, nodes, deps))
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.5})
    d.run(3)
    cluster, _ = d.watcher.apply_resolution(d.agent(agent_id), Action.MIGRATE, d.cluster)
    assert cluster.deployment("api").node == "w3"


def test_deleted_agents_are_forgotten():
    d = Driver(two_node_cluster())
    d.run(5)
    agent_id = d.add({"scope": "deployment", "target": "api", "cpu_factor": 0.9})
    d.run(2)
    d.agents = [a.transition(S.DELETED) for a in d.agents]
    d.run(1)
    assert agent_id not in d.watcher._tracks


# -- specification conflicts between overlapping agents ----------------------

GRID = (0.5, 0.7, 0.85, 1.0, 1.2)
# keep latency breaches out of the way so only the overwrite fight is measured
SPEC_ONLY = WatcherConfig(latency_degradation_factor=2.5)
A_TICK, B_TICK, HORIZON = 5, 7, 24


def fight(f_node: float, f_dep: float):
    d = Driver(two_node_cluster(), SPEC_ONLY)
    d.run(A_TICK)
    a = d.add({"scope": "node", "target": "worker-1", "cpu_factor": f_node})
    d.run(B_TICK - A_TICK)
    b = d.add({"scope": "deployment", "target": "api", "cpu_factor": f_dep})
    trace = {}
    for _ in range(HORIZON - B_TICK):
        d.run(1)
        trace[d.cluster.tick] = [d.agent(a).status.value, d.agent(b).status.value]
    return d, a, b, trace


@pytest.mark.parametrize("f_node, f_dep", list(itertools.product(GRID, GRID)))
def test_overlapping_agents_match_alternation_oracle(f_node, f_dep):
    d, a, b, trace = fight(f_node, f_dep)
    # api's unconstrained usage is exactly 1.0 core at zero noise
    oracle = alternation(
        limits=[f_node * 1.0, f_dep * 1.0],
        starts=[A_TICK + 1, B_TICK + 1],
        cycles=HORIZON + 1,
        threshold=SPEC_ONLY.spec_conflict_threshold,
        tol=SPEC_ONLY.tolerance,
    )
    for tick, statuses in trace.items():
        assert statuses == oracle[tick], f"tick {tick}"
    if f_node == f_dep:
        assert trace[HORIZON] == ["active", "active"]
        return
    first = {i: min(t for t, s in trace.items() if s[i] == "conflicting") for i in (0, 1)}
    cycles_from_b = max(first.values()) - B_TICK
    assert cycles_from_b <= 2 * SPEC_ONLY.spec_conflict_threshold
    # latest-wins settles the fight: the newer agent owns api, the older yields
    assert trace[HORIZON] == ["conflicting", "conflicting"]
    assert d.cluster.deployment("api").cpu_limit == pytest.approx(f_dep)
    assert d.cluster.deployment("cache").cpu_limit == pytest.approx(0.5 * f_node)


def test_winner_leaving_hands_enforcement_back():
    d, a, b, _ = fight(0.85, 1.2)
    d.agents = [x.transition(S.DELETED) if x.id == b else x for x in d.agents]
    d.run(2)
    assert d.cluster.deployment("api").cpu_limit == pytest.approx(0.85)


@given(
    factor=st.floats(0.05, 5.0),
    cap=st.one_of(st.none(), st.floats(0.01, 5.0)),
    usage=st.floats(0.01, 4.0),
)
def test_limits_for_is_factor_times_baseline_capped(factor, cap, usage):
    from carm.drl.features import Aggregate
    from carm.spec import validate_spec

    doc = {"scope": "deployment", "target": "x", "cpu_factor": factor}
    if cap is not None:
        doc["cpu_cap"] = cap
    agent = validate_spec(doc)
    lim = limits_for(agent, Aggregate(1, usage, 1e9, usage, 1e9, 10.0))
    expect = usage * factor if cap is None else min(usage * factor, cap)
    assert lim.cpu == pytest.approx(expect)
    assert lim.mem is None


@given(st.integers(1, 4), st.sampled_from([0.8, 0.9, 1.1, 1.5]))
def test_single_agent_never_conflicts_with_itself(interval, factor):
    d = Driver(two_node_cluster(0.02), WatcherConfig(interval_ticks=interval))
    d.run(6)
    agent_id = d.add({"scope": "namespace", "target": "web", "cpu_factor": factor, "mem_factor": 1.5})
    d.run(30)
    assert d.agent(agent_id).status is S.ACTIVE
