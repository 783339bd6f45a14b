import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from carm import sim
from carm.errors import (
    InsufficientCapacity,
    IoFailure,
    MalformedScenario,
    ScaleBelowOne,
    UnknownDeployment,
    UnknownNode,
)
from conftest import two_node_cluster
from oracles import analytic_latency


def run(state, n):
    events, samples = [], []
    for _ in range(n):
        state, ev, sm = sim.tick(state)
        events += ev
        samples += sm
    return state, events, samples


def test_unlimited_tick_is_noise_free_at_zero_epsilon(cluster):
    state, events, samples = sim.tick(cluster)
    assert state.tick == 1 and events == []
    api = next(s for s in samples if s.deployment == "api")
    assert (api.cpu_usage, api.mem_usage, api.latency) == (1.0, 1e9, 10.0)


@pytest.mark.parametrize("limit", [0.5, 0.8, 1.0, 1.5])
def test_latency_matches_the_throttling_oracle(cluster, limit):
    state = sim.apply_limit(cluster, "api", cpu_limit=limit)
    state, _, samples = sim.tick(state)
    api = next(s for s in samples if s.deployment == "api")
    assert api.latency == pytest.approx(analytic_latency(10.0, 1.0, limit), rel=1e-12)
    assert api.cpu_usage == min(1.0, limit)


def test_limit_event_lands_on_the_next_tick(cluster):
    state = sim.apply_limit(cluster, "api", cpu_limit=0.8)
    assert state.pending_events[0].tick == 1
    state, events, _ = sim.tick(state)
    assert [e.kind for e in events] == [sim.EventKind.LIMIT_APPLIED]
    assert state.pending_events == ()


def test_apply_limit_keeps_omitted_dimension(cluster):
    state = sim.apply_limit(cluster, "api", cpu_limit=0.8, mem_limit=2e9)
    state = sim.apply_limit(state, "api", cpu_limit=0.7)
    assert state.deployment("api").mem_limit == 2e9
    state = sim.apply_limit(state, "api", mem_limit=None)
    assert state.deployment("api").mem_limit is None


def test_oom_kill_triples_latency(cluster):
    state = sim.apply_limit(cluster, "api", mem_limit=0.5e9)
    state, events, samples = sim.tick(state)
    assert any(e.kind is sim.EventKind.OOM_KILL and e.deployment == "api" for e in events)
    api = next(s for s in samples if s.deployment == "api")
    assert api.latency == pytest.approx(30.0)


def test_migration_costs_one_tick(cluster):
    state = sim.migrate(cluster, "api", "worker-2")
    state, _, s1 = sim.tick(state)
    state, _, s2 = sim.tick(state)
    lat = [next(s.latency for s in batch if s.deployment == "api") for batch in (s1, s2)]
    assert lat == [pytest.approx(15.0), pytest.approx(10.0)]
    assert state.deployment("api").node == "worker-2"


def test_migration_needs_room():
    state = two_node_cluster(api={"cpu_demand": 3.0}, cache={"cpu_demand": 0.5, "node": "worker-2"})
    state = sim.apply_limit(state, "cache", cpu_limit=0.5)
    assert sim.residual_cpu(state, "worker-2") == pytest.approx(3.5)
    sim.migrate(state, "api", "worker-2")
    big = two_node_cluster(api={"cpu_demand": 3.8}, cache={"node": "worker-2"})
    with pytest.raises(InsufficientCapacity):
        sim.migrate(big, "api", "worker-2")
    with pytest.raises(UnknownNode):
        sim.migrate(big, "api", "worker-9")


def test_scale_conserves_totals(cluster):
    up = sim.scale(cluster, "api", 1)
    dep = up.deployment("api")
    assert dep.replicas == 2
    assert dep.total_cpu_demand == pytest.approx(1.0)
    assert dep.total_mem_demand == pytest.approx(1e9)
    assert sim.scale(up, "api", -1).deployment("api").replicas == 1
    with pytest.raises(ScaleBelowOne):
        sim.scale(cluster, "api", -1)
    with pytest.raises(ValueError):
        sim.scale(cluster, "api", 2)


def test_unknown_names(cluster):
    with pytest.raises(UnknownDeployment):
        sim.apply_limit(cluster, "nope", cpu_limit=1.0)
    with pytest.raises(UnknownNode):
        cluster.node("nope")


def test_node_figures(reference_scenario):
    state = sim.init(reference_scenario.with_sim(noise_epsilon=0.0))
    assert sim.node_utilization(state, "worker-1") == pytest.approx(2.86 / 4)
    assert sim.node_mem_reserved(state, "worker-1") == pytest.approx(4.48e9 / 8e9)
    for name, lim in (("cons-a", 0.8), ("cons-b", 0.78), ("cons-c", 0.85)):
        state = sim.apply_limit(state, name, cpu_limit=lim)
    state, _, _ = sim.tick(state)
    assert sim.node_utilization(state, "worker-1") == pytest.approx(2.43 / 4)
    assert sim.node_cpu_reserved(state, "worker-1") == pytest.approx(2.43 / 4)


def test_noise_is_bounded_and_per_deployment(reference_scenario):
    a = sim.init(reference_scenario, seed=7)
    b = sim.init(reference_scenario, seed=7)
    _, _, sa = run(a, 20)
    _, _, sb = run(b, 20)
    assert sa == sb
    for s in sa:
        dep = a.deployment(s.deployment)
        assert 0.98 * dep.cpu_demand <= s.cpu_usage <= 1.02 * dep.cpu_demand
    # dropping a deployment does not disturb another's trajectory
    only_a = sim.ClusterState(0, a.nodes, a.deployments[:1], 7, a.config)
    _, _, so = run(only_a, 20)
    assert [s for s in sa if s.deployment == "cons-a"] == so


def test_scenario_errors_carry_field_paths(tmp_path):
    good = {
        "nodes": [{"name": "n1", "cpu_capacity": 4, "mem_capacity": 8e9}],
        "deployments": [{"name": "d", "node": "n1", "cpu_demand": 1, "mem_demand": 1e9, "base_latency": 5}],
    }
    sim.parse_scenario(good)
    bad = json.loads(json.dumps(good))
    bad["deployments"][0]["node"] = "n9"
    with pytest.raises(MalformedScenario) as info:
        sim.parse_scenario(bad)
    assert info.value.field == "deployments[0].node"
    bad = json.loads(json.dumps(good))
    del bad["nodes"][0]["cpu_capacity"]
    with pytest.raises(MalformedScenario) as info:
        sim.parse_scenario(bad)
    assert info.value.field == "nodes[0].cpu_capacity"
    with pytest.raises(MalformedScenario):
        sim.parse_scenario({**good, "extra": 1})
    with pytest.raises(MalformedScenario):
        sim.parse_scenario({**good, "agents": [{"at_tick": -1, "spec": {}}]})
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(MalformedScenario):
        sim.load_scenario(path)
    with pytest.raises(IoFailure):
        sim.load_scenario(tmp_path / "missing.json")


@given(
    demand=st.floats(0.1, 3.0),
    limit=st.one_of(st.none(), st.floats(0.05, 4.0)),
    eps=st.sampled_from([0.0, 0.02, 0.1]),
    seed=st.integers(0, 2**16),
)
def test_usage_never_exceeds_limit_and_latency_never_beats_base(demand, limit, eps, seed):
    state = two_node_cluster(eps, api={"cpu_demand": demand, "cpu_limit": limit})
    state = sim.ClusterState(0, state.nodes, state.deployments, seed, state.config)
    _, _, samples = run(state, 5)
    for s in samples:
        if s.deployment != "api":
            continue
        if limit is not None:
            assert s.cpu_usage <= limit + 1e-12
        assert s.latency >= 10.0 - 1e-12


@given(st.lists(st.sampled_from([1, -1]), max_size=8))
def test_scaling_keeps_totals(deltas):
    state = two_node_cluster(api={"cpu_demand": 1.2, "mem_demand": 3e9})
    for d in deltas:
        try:
            state = sim.scale(state, "api", d)
        except ScaleBelowOne:
            assert state.deployment("api").replicas == 1
    dep = state.deployment("api")
    assert dep.total_cpu_demand == pytest.approx(1.2)
    assert dep.total_mem_demand == pytest.approx(3e9)
