"""Independent reference computations the implementation is checked against.

Each oracle is written from first principles and shares no code with the
package beyond plain data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def analytic_latency(base: float, demand: float, limit: float | None) -> float:
    """Latency grows with the fraction of demand that does not fit the limit."""
    if limit is None:
        return base
    return base * max(1.0, demand / limit)


def value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Optimal Q and greedy policy for a finite MDP.

    ``P[s, a, s']`` are transition probabilities, ``R[s, a]`` expected rewards.
    """
    n_s, n_a = R.shape
    q = np.zeros((n_s, n_a))
    while True:
        v = q.max(axis=1)
        q_new = R + gamma * np.einsum("ijk,k->ij", P, v)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new, q_new.argmax(axis=1)
        q = q_new


def finite_difference(f, params: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` with respect to every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


@dataclass
class _Writer:
    name: str
    limit: float
    active_from: int  # first cycle this writer is enforced
    status: str = "pending"
    count: int = 0
    yielded: bool = False


def alternation(limits: list[float], starts: list[int], cycles: int, threshold: int, tol: float) -> list[list[str]]:
    """Brute-force replay of writers fighting over one limit field.

    Writers are listed oldest first. Each cycle every writer, in order, compares
    the field with its own value; a mismatch beyond ``tol`` is rewritten and
    counted, a match resets an Active writer's count. A writer reaching
    ``threshold`` consecutive rewrites is flagged conflicting; once any writer
    is flagged the newest writer is pinned as owner and the others stand down.
    A flagged writer still seeing a mismatch on the next cycle escalates.
    Returns each writer's status after every cycle.
    """
    ws = [_Writer(f"w{i}", lim, st) for i, (lim, st) in enumerate(zip(limits, starts))]
    field_value: float | None = None
    history = []
    for c in range(cycles):
        flagged_now = False
        for w in ws:
            if c < w.active_from or w.status == "escalated":
                continue
            if w.status == "pending":
                field_value = w.limit
                w.status = "active"
                continue
            mismatch = not w.yielded and abs(field_value - w.limit) > tol * w.limit
            if mismatch:
                field_value = w.limit
                w.count += 1
            elif w.status == "active":
                w.count = 0
            if w.status == "active" and w.count >= threshold:
                w.status = "conflicting"
                flagged_now = True
            elif w.status == "conflicting" and mismatch:
                w.status = "escalated"
        if flagged_now:
            live = [w for w in ws if w.status in ("active", "conflicting")]
            owner = live[-1]
            for w in live:
                if w is not owner:
                    w.yielded = True
            field_value = owner.limit
        history.append([w.status for w in ws])
    return history
