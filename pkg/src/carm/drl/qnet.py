"""Small feed-forward Q-network in plain numpy, with backprop and Adam."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from carm.drl.features import DEFAULT_SCALES, STATE_DIM, Action, DrlState

N_ACTIONS = len(Action)
LAYER_SIZES = (STATE_DIM, 32, 32, N_ACTIONS)


@dataclass
class QModel:
    """``params`` alternates weight matrices and bias vectors: W1, b1, W2, b2, W3, b3."""

    params: list[np.ndarray]
    scales: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCALES))
    steps: int = 0
    parent: str = "meta"

    @classmethod
    def initialize(cls, seed: int = 0, sizes: Sequence[int] = LAYER_SIZES, **meta) -> QModel:
        rng = np.random.default_rng(seed)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return cls(params, **meta)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.params[0].shape[0],) + tuple(w.shape[1] for w in self.params[0::2])

    def clone(self, parent: str | None = None) -> QModel:
        return QModel(
            [p.copy() for p in self.params],
            dict(self.scales),
            self.steps,
            self.parent if parent is None else parent,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(x)
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def q_values(self, state: DrlState | np.ndarray) -> np.ndarray:
        x = state.array if isinstance(state, DrlState) else np.asarray(state, dtype=np.float64)
        return self.forward(x)[0]

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given dLoss/dOutput for a batch."""
        acts = [np.atleast_2d(x)]
        pre = []
        n_layers = len(self.params) // 2
        h = acts[0]
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        grads: list[np.ndarray] = [np.empty(0)] * len(self.params)
        delta = grad_out
        for i in reversed(range(n_layers)):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[2 * i].T) * (pre[i - 1] > 0)
        return grads

    def weight_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)

    def weight_hash(self) -> str:
        return hashlib.sha256(self.weight_bytes()).hexdigest()


def predict(model: QModel, state: DrlState, allowed: Sequence[int] | None = None) -> tuple[Action, np.ndarray]:
    """Greedy action; ties go to the lowest action code."""
    q = model.q_values(state)
    candidates = range(N_ACTIONS) if allowed is None else sorted(allowed)
    best = max(candidates, key=lambda a: (q[a], -a))
    return Action(best), q


def td_loss_and_grads(
    model: QModel,
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean of ``0.5 * (Q(s, a) - y)**2`` with ``y`` held fixed (semi-gradient TD)."""
    q = model.forward(states)
    idx = np.arange(len(actions))
    err = q[idx, actions] - targets
    loss = 0.5 * float(np.mean(err**2))
    grad_out = np.zeros_like(q)
    grad_out[idx, actions] = err / len(actions)
    return loss, model.backward(states, grad_out)


def td_targets(
    target_model: QModel,
    rewards: np.ndarray,
    next_states: np.ndarray,
    terminal: np.ndarray,
    gamma: float,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """``r + gamma * max_a Q_target(s', a)``; ``mask`` adds -inf to disallowed actions."""
    q_next = target_model.forward(next_states)
    if mask is not None:
        q_next = q_next + mask
    bootstrap = q_next.max(axis=1)
    return rewards + gamma * (1.0 - terminal) * bootstrap


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

