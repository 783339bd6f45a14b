"""In-process time-series store for per-deployment samples."""

from __future__ import annotations

import bisect
import csv
import json
import threading
from collections.abc import Iterable, Iterator
from dataclasses import asdict, dataclass
from pathlib import Path

from carm.errors import IoFailure, UnknownMetric

METRICS = ("cpu_usage", "mem_usage", "latency", "cpu_limit", "mem_limit", "replicas")
COLUMNS = ("tick", "deployment") + METRICS


@dataclass(frozen=True)
class MetricsSample:
    tick: int
    deployment: str
    cpu_usage: float
    mem_usage: float
    latency: float
    cpu_limit: float | None
    mem_limit: float | None
    replicas: int

    def __post_init__(self) -> None:
        if self.tick < 0 or self.cpu_usage < 0 or self.mem_usage < 0 or self.latency < 0:
            raise ValueError(f"negative field in sample {self!r}")


@dataclass(frozen=True)
class MetricsSeries:
    deployment: str
    samples: tuple[MetricsSample, ...]

    def __len__(self) -> int:
        return len(self.samples)


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise UnknownMetric(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")


class MetricsStore:
    """Single writer, many readers. Reads copy under the lock, so a reader
    never sees a half-applied record."""

    def __init__(self, samples: Iterable[MetricsSample] = ()) -> None:
        self._lock = threading.Lock()
        self._ticks: dict[str, list[int]] = {}
        self._data: dict[str, dict[int, MetricsSample]] = {}
        for sample in samples:
            self.record(sample)

    def record(self, sample: MetricsSample) -> None:
        with self._lock:
            by_tick = self._data.setdefault(sample.deployment, {})
            if sample.tick not in by_tick:
                ticks = self._ticks.setdefault(sample.deployment, [])
                if not ticks or ticks[-1] < sample.tick:
                    ticks.append(sample.tick)
                else:
                    bisect.insort(ticks, sample.tick)
            by_tick[sample.tick] = sample

    def deployments(self) -> list[str]:
        with self._lock:
            return sorted(self._data)

    def __len__(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._data.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetricsStore):
            return NotImplemented
        return list(self) == list(other)

    def __iter__(self) -> Iterator[MetricsSample]:
        """All samples ordered by (tick, deployment)."""
        with self._lock:
            everything = [s for by_tick in self._data.values() for s in by_tick.values()]
        return iter(sorted(everything, key=lambda s: (s.tick, s.deployment)))

    def series(self, deployment: str) -> MetricsSeries:
        return MetricsSeries(deployment, tuple(self._window(deployment, None, None)))

    def _window(self, deployment: str, lo: int | None, hi: int | None) -> list[MetricsSample]:
        with self._lock:
            ticks = self._ticks.get(deployment, [])
            start = 0 if lo is None else bisect.bisect_left(ticks, lo)
            stop = len(ticks) if hi is None else bisect.bisect_right(ticks, hi)
            by_tick = self._data.get(deployment, {})
            return [by_tick[t] for t in ticks[start:stop]]

    def samples_in(self, deployment: str, window: tuple[int, int]) -> list[MetricsSample]:
        lo, hi = window
        if lo > hi:
            raise ValueError(f"empty window {window!r}: tick_from > tick_to")
        return self._window(deployment, lo, hi)

    def query_range(self, deployment: str, metric: str, window: tuple[int, int]) -> list[tuple[int, float | None]]:
        _check_metric(metric)
        return [(s.tick, getattr(s, metric)) for s in self.samples_in(deployment, window)]

    def window_avg(self, deployment: str, metric: str, window: tuple[int, int]) -> float | None:
        """Mean over the closed window, ignoring unset limits; None if nothing to average."""
        values = [v for _, v in self.query_range(deployment, metric, window) if v is not None]
        if not values:
            return None
        return sum(values) / len(values)

    def last_tick(self, deployment: str) -> int | None:
        with self._lock:
            ticks = self._ticks.get(deployment)
            return ticks[-1] if ticks else None

    # -- persistence ---------------------------------------------------------

    def export(self, path: str | Path, format: str = "csv") -> None:
        path = Path(path)
        rows = [asdict(s) for s in self]
        try:
            if format == "csv":
                with path.open("w", newline="") as fh:
                    writer = csv.writer(fh, lineterminator="\n")
                    writer.writerow(COLUMNS)
                    for row in rows:
                        writer.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in COLUMNS])
            elif format == "jsonl":
                with path.open("w") as fh:
                    for row in rows:
                        fh.write(json.dumps({c: row[c] for c in COLUMNS}) + "\n")
            else:
                raise ValueError(f"unknown export format {format!r}")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path, format: str = "csv") -> MetricsStore:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        if format == "csv":
            reader = csv.DictReader(text.splitlines())
            if tuple(reader.fieldnames or ()) != COLUMNS:
                raise IoFailure(f"{path}: unexpected header {reader.fieldnames!r}")
            return cls(_sample_from_csv(row) for row in reader)
        if format == "jsonl":
            return cls(MetricsSample(**json.loads(line)) for line in text.splitlines() if line.strip())
        raise ValueError(f"unknown export format {format!r}")


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _sample_from_csv(row: dict[str, str]) -> MetricsSample:
    return MetricsSample(
        tick=int(row["tick"]),
        deployment=row["deployment"],
        cpu_usage=float(row["cpu_usage"]),
        mem_usage=float(row["mem_usage"]),
        latency=float(row["latency"]),
        cpu_limit=_opt_float(row["cpu_limit"]),
        mem_limit=_opt_float(row["mem_limit"]),
        replicas=int(row["replicas"]),
    )
