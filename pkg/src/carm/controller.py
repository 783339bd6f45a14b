"""Agent store: the shared state the controller writes and the watcher reads.

The controller side owns creation, update and deletion (Pending and Deleted
statuses); the watcher commits everything else through :meth:`AgentStore.commit`.
All mutation happens under one lock, and readers get immutable snapshots.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, replace
from typing import Any

from carm.errors import MalformedSpec, UnknownAgent
from carm.spec import DOCUMENT_KEYS, AgentSpec, AgentStatus, Scope, status_path, validate_spec


@dataclass(frozen=True)
class AgentStoreEntry:
    spec: AgentSpec
    history: tuple[tuple[int, AgentStatus], ...]
    generation: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent": self.spec.to_dict(),
            "history": [[tick, status.value] for tick, status in self.history],
        }


class AgentStore:
    def __init__(self, clock: Callable[[], int] = lambda: 0, cluster: Callable[[], Any] | None = None) -> None:
        self._clock = clock
        self._cluster = cluster
        self._lock = threading.Lock()
        self._entries: dict[str, AgentStoreEntry] = {}
        self._seq = 0

    def _next_id(self) -> str:
        self._seq += 1
        return f"agent-{self._seq:04d}"

    def _validate(self, doc: Mapping[str, Any], agent_id: str, created_at: int) -> AgentSpec:
        cluster = self._cluster() if self._cluster is not None else None
        return validate_spec(doc, agent_id=agent_id, created_at=created_at, cluster=cluster)

    def _set_status(self, entry: AgentStoreEntry, spec: AgentSpec, tick: int) -> AgentStoreEntry:
        steps = status_path(entry.spec.status, spec.status)
        history = entry.history + tuple((tick, s) for s in steps)
        return AgentStoreEntry(spec, history, entry.generation)

    def _delete_key_clashes(self, spec: AgentSpec, tick: int) -> None:
        for other_id, entry in self._entries.items():
            if other_id != spec.id and entry.spec.status is not AgentStatus.DELETED and entry.spec.key == spec.key:
                self._entries[other_id] = replace(
                    self._set_status(entry, entry.spec.transition(AgentStatus.DELETED), tick),
                    generation=entry.generation + 1,
                )

    # -- controller operations ----------------------------------------------

    def create(self, doc: Mapping[str, Any]) -> str:
        """Validate and store a new Pending agent. An existing live agent with the
        same (scope, target) is marked Deleted."""
        with self._lock:
            tick = self._clock()
            spec = self._validate(doc, "", tick)
            spec = replace(spec, id=self._next_id())
            self._delete_key_clashes(spec, tick)
            self._entries[spec.id] = AgentStoreEntry(spec, ((tick, AgentStatus.PENDING),))
            return spec.id

    def update(self, agent_id: str, patch: Mapping[str, Any]) -> AgentSpec:
        if not isinstance(patch, Mapping):
            raise MalformedSpec("patch must be an object")
        with self._lock:
            entry = self._live(agent_id)
            tick = self._clock()
            doc = {**entry.spec.to_document(), **patch}
            doc = {k: v for k, v in doc.items() if v is not None or k not in DOCUMENT_KEYS[2:]}
            fresh = self._validate(doc, agent_id, entry.spec.created_at)
            spec = replace(fresh, status=AgentStatus.PENDING, restart_count=0, last_applied_at=entry.spec.last_applied_at)
            self._delete_key_clashes(spec, tick)
            history = entry.history
            if entry.spec.status is not AgentStatus.PENDING:
                history = history + ((tick, AgentStatus.PENDING),)
            self._entries[agent_id] = AgentStoreEntry(spec, history, entry.generation + 1)
            return spec

    def delete(self, agent_id: str) -> AgentSpec:
        with self._lock:
            entry = self._live(agent_id)
            spec = entry.spec.transition(AgentStatus.DELETED)
            self._entries[agent_id] = replace(self._set_status(entry, spec, self._clock()), generation=entry.generation + 1)
            return spec

    def _live(self, agent_id: str) -> AgentStoreEntry:
        entry = self._entries.get(agent_id)
        if entry is None or entry.spec.status is AgentStatus.DELETED:
            raise UnknownAgent(f"no live agent {agent_id!r}")
        return entry

    def get(self, agent_id: str) -> AgentStoreEntry:
        with self._lock:
            entry = self._entries.get(agent_id)
        if entry is None:
            raise UnknownAgent(f"no agent {agent_id!r}")
        return entry

    def list(
        self,
        status: AgentStatus | str | None = None,
        scope: Scope | str | None = None,
    ) -> list[AgentStoreEntry]:
        """Entries ordered by creation. Deleted agents appear only when asked for."""
        status = AgentStatus(status.lower() if isinstance(status, str) else status) if status is not None else None
        scope = Scope(scope.lower() if isinstance(scope, str) else scope) if scope is not None else None
        with self._lock:
            entries = list(self._entries.values())
        out = []
        for e in entries:
            if status is None and e.spec.status is AgentStatus.DELETED:
                continue
            if status is not None and e.spec.status is not status:
                continue
            if scope is not None and e.spec.scope is not scope:
                continue
            out.append(e)
        return sorted(out, key=lambda e: (e.spec.created_at, e.spec.id))

    # -- watcher side -------------------------------------------------------

    def snapshot(self) -> dict[str, AgentStoreEntry]:
        with self._lock:
            return dict(self._entries)

    def commit(self, specs: Iterable[AgentSpec], seen: Mapping[str, AgentStoreEntry]) -> list[str]:
        """Write back watcher results. An agent the controller touched since
        ``seen`` was taken is left alone. Returns the ids actually written."""
        written = []
        with self._lock:
            tick = self._clock()
            for spec in specs:
                current = self._entries.get(spec.id)
                before = seen.get(spec.id)
                if current is None or before is None or current.generation != before.generation:
                    continue
                if spec == current.spec:
                    continue
                self._entries[spec.id] = self._set_status(current, spec, tick)
                written.append(spec.id)
        return written
