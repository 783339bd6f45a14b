"""One-step deep Q-learning with uniform experience replay."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from carm.drl.features import DrlState
from carm.drl.qnet import Adam, QModel, td_loss_and_grads, td_targets
from carm.errors import EmptyDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 3000
    target_sync: int = 50
    seed: int = 0
    eps_start: float = 1.0
    eps_end: float = 0.05
    episodes: int = 400
    updates_per_step: int = 4
    valid_actions: tuple[int, ...] = (0, 1, 2, 3)


@dataclass(frozen=True)
class Transition:
    state: DrlState
    action: int
    reward: float
    next_state: DrlState
    terminal: bool


def _as_arrays(dataset: Sequence[Transition]):
    states = np.stack([t.state.array for t in dataset])
    actions = np.array([int(t.action) for t in dataset])
    rewards = np.array([t.reward for t in dataset], dtype=np.float64)
    nexts = np.stack([t.next_state.array for t in dataset])
    terminal = np.array([t.terminal for t in dataset], dtype=np.float64)
    return states, actions, rewards, nexts, terminal


class _Learner:
    """Online network, target network and optimizer, stepped together."""

    def __init__(self, model: QModel, config: TrainConfig) -> None:
        self.model = model
        self.config = config
        self.target = model.clone()
        self.opt = Adam(model.params, lr=config.lr)
        mask = np.full(len(model.params[-1]), -np.inf)
        mask[list(config.valid_actions)] = 0.0
        self.mask = mask

    def update(self, batch) -> float:
        states, actions, rewards, nexts, terminal = batch
        y = td_targets(self.target, rewards, nexts, terminal, self.config.gamma, self.mask)
        loss, grads = td_loss_and_grads(self.model, states, actions, y)
        self.opt.step(self.model.params, grads)
        self.model.steps += 1
        if self.model.steps % self.config.target_sync == 0:
            self.target = self.model.clone()
        return loss


def train_meta(dataset: Sequence[Transition], config: TrainConfig = TrainConfig(), model: QModel | None = None) -> QModel:
    """Fit a Q-model to a fixed replay buffer. Deterministic for a given seed."""
    if not dataset:
        raise EmptyDataset("train_meta needs at least one transition")
    rng = np.random.default_rng(config.seed)
    model = QModel.initialize(config.seed) if model is None else model
    learner = _Learner(model, config)
    arrays = _as_arrays(dataset)
    n = len(dataset)
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        learner.update(tuple(a[idx] for a in arrays))
    return model


def epsilon_at(episode: int, config: TrainConfig) -> float:
    """Linear decay from eps_start to eps_end over the first 80% of episodes."""
    horizon = max(1, int(0.8 * config.episodes))
    frac = min(1.0, episode / horizon)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


class Environment(Protocol):
    def reset(self, rng: np.random.Generator) -> DrlState: ...

    def step(self, action: int) -> tuple[DrlState, float, bool]: ...


def train_online(env: Environment, config: TrainConfig = TrainConfig(), model: QModel | None = None) -> QModel:
    """Epsilon-greedy collection interleaved with replay updates."""
    rng = np.random.default_rng(config.seed)
    model = QModel.initialize(config.seed) if model is None else model
    learner = _Learner(model, config)
    buf: tuple[list, ...] = ([], [], [], [], [])
    for episode in range(config.episodes):
        eps = epsilon_at(episode, config)
        state = env.reset(rng)
        done = False
        while not done:
            if rng.random() < eps:
                action = int(rng.choice(config.valid_actions))
            else:
                q = model.q_values(state)
                action = max(config.valid_actions, key=lambda a: (q[a], -a))
            next_state, r, done = env.step(action)
            for column, value in zip(buf, (state.array, action, r, next_state.array, float(done))):
                column.append(value)
            state = next_state
            n = len(buf[0])
            if n < config.batch_size:
                continue
            for _ in range(config.updates_per_step):
                idx = rng.integers(0, n, size=config.batch_size)
                learner.update(
                    (
                        np.stack([buf[0][i] for i in idx]),
                        np.array([buf[1][i] for i in idx]),
                        np.array([buf[2][i] for i in idx], dtype=np.float64),
                        np.stack([buf[3][i] for i in idx]),
                        np.array([buf[4][i] for i in idx]),
                    )
                )
        if episode % 100 == 0:
            log.debug("episode %d eps=%.2f replay=%d", episode, eps, len(buf[0]))
    return model
