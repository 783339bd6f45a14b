"""Synthetic conflict episodes for pre-training the meta model.

Each episode places one deployment on a small two-worker cluster, lets it run
unconstrained, then imposes limits drawn from one of three situations: memory
below demand (OOM), CPU squeezed past the latency bound, or a benign cut. The
agent then picks corrective actions until the deployment is healthy or three
actions have been spent. Every transition is produced by the real simulator.
"""

from __future__ import annotations

import numpy as np

from carm import sim
from carm.drl.features import Action, Aggregate, DrlState, featurize
from carm.drl.reward import Outcome, allocation, reward
from carm.errors import InsufficientCapacity, ScaleBelowOne
from carm.metrics import MetricsSample

WINDOW = 5
MAX_ACTIONS = 3
LATENCY_FACTOR = 1.30


class ConflictEnv:
    def __init__(self, noise_epsilon: float = 0.02, window: int = WINDOW) -> None:
        self.noise_epsilon = noise_epsilon
        self.window = window
        self._state: sim.ClusterState | None = None

    def _run(self, n: int) -> tuple[list[MetricsSample], int]:
        samples, ooms = [], 0
        for _ in range(n):
            self._state, events, batch = sim.tick(self._state)
            samples += batch
            ooms += sum(e.kind is sim.EventKind.OOM_KILL for e in events)
        return samples, ooms

    def reset(self, rng: np.random.Generator) -> DrlState:
        demand = float(rng.uniform(0.3, 1.5))
        mem = float(rng.uniform(0.5e9, 2.0e9))
        replicas = int(rng.integers(1, 4))
        dep = sim.DeploymentState(
            name="svc",
            namespace="train",
            node="worker-a",
            replicas=replicas,
            cpu_demand=demand / replicas,
            mem_demand=mem / replicas,
            base_latency=float(rng.uniform(5.0, 25.0)),
        )
        self._state = sim.ClusterState(
            tick=0,
            nodes=(
                sim.NodeSpec("worker-a", 4.0, 8e9),
                sim.NodeSpec("worker-b", 4.0, 8e9),
            ),
            deployments=(dep,),
            rng_seed=int(rng.integers(0, 2**31)),
            config=sim.SimConfig(noise_epsilon=self.noise_epsilon),
        )
        before_samples, _ = self._run(self.window)
        self.before = Aggregate.from_samples(before_samples)

        kind = rng.integers(0, 3)
        per_cpu, per_mem = dep.cpu_demand, dep.mem_demand
        if kind == 0:
            cpu_lim = per_cpu * rng.uniform(0.8, 1.2)
            mem_lim = per_mem * rng.uniform(0.35, 0.9)
        elif kind == 1:
            cpu_lim = per_cpu * rng.uniform(0.35, 0.72)
            mem_lim = None if rng.random() < 0.5 else per_mem * rng.uniform(1.1, 1.5)
        else:
            cpu_lim = per_cpu * rng.uniform(0.8, 1.2)
            mem_lim = None if rng.random() < 0.5 else per_mem * rng.uniform(1.1, 1.5)
        self._state = sim.apply_limit(self._state, "svc", cpu_limit=float(cpu_lim), mem_limit=mem_lim)
        self.actions_taken = 0
        return self._observe()

    def _observe(self) -> DrlState:
        self.after_samples, self.after_ooms = self._run(self.window)
        return featurize(self.before, Aggregate.from_samples(self.after_samples))

    def step(self, action: int) -> tuple[DrlState, float, bool]:
        alloc_before = sum(allocation(s) for s in self.after_samples) / len(self.after_samples)
        try:
            self._state = apply_action(self._state, "svc", Action(action))
        except (InsufficientCapacity, ScaleBelowOne):
            pass
        next_state = self._observe()
        r = reward(
            Outcome(
                self.after_samples,
                baseline_latency=self.before.latency,
                allocation_before=alloc_before,
                oom_kills=self.after_ooms,
                latency_factor=LATENCY_FACTOR,
            )
        )
        self.actions_taken += 1
        done = r >= 0 or self.actions_taken >= MAX_ACTIONS
        return next_state, r, done


def apply_action(state: sim.ClusterState, deployment: str, action: Action) -> sim.ClusterState:
    if action is Action.OPTIMIZE:
        return state
    if action is Action.MIGRATE:
        dest = least_utilized_node(state, deployment)
        if dest is None:
            raise InsufficientCapacity(f"no feasible destination for {deployment}")
        return sim.migrate(state, deployment, dest)
    return sim.scale(state, deployment, -1 if action is Action.SCALE_DOWN else 1)


def least_utilized_node(state: sim.ClusterState, deployment: str) -> str | None:
    """Least-utilized worker that can fit the deployment; ties by name."""
    dep = state.deployment(deployment)
    best = None
    for node in state.nodes:
        if node.role != "worker" or node.name == dep.node:
            continue
        if sim.residual_cpu(state, node.name) < dep.total_cpu_demand:
            continue
        key = (sim.node_utilization(state, node.name), node.name)
        if best is None or key < best:
            best = key
    return None if best is None else best[1]


def bootstrap_meta(seed: int = 0, episodes: int = 800):
    """Train a fresh meta model on synthetic episodes."""
    from carm.drl.train import TrainConfig, train_online

    return train_online(ConflictEnv(), TrainConfig(seed=seed, episodes=episodes))
