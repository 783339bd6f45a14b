import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from carm.errors import IoFailure, UnknownMetric
from carm.metrics import COLUMNS, MetricsSample, MetricsStore


def sample(tick, dep="cons-a", latency=12.6, cpu=0.94, cpu_limit=None, mem_limit=None, replicas=1):
    return MetricsSample(tick, dep, cpu, 1.5e9, latency, cpu_limit, mem_limit, replicas)


def test_write_then_read():
    store = MetricsStore()
    store.record(sample(5))
    assert store.query_range("cons-a", "latency", (5, 5)) == [(5, 12.6)]


def test_last_write_wins():
    store = MetricsStore()
    store.record(sample(5, latency=12.6))
    store.record(sample(5, latency=20.0))
    assert store.query_range("cons-a", "latency", (0, 10)) == [(5, 20.0)]
    assert len(store) == 1


def test_hundred_ticks_ascending():
    store = MetricsStore()
    for t in reversed(range(1, 101)):
        store.record(sample(t))
    series = store.series("cons-a")
    assert len(series) == 100
    assert [s.tick for s in series.samples] == list(range(1, 101))


def test_queries():
    store = MetricsStore()
    for t, cpu in zip((1, 2, 3), (0.94, 0.92, 1.00)):
        store.record(sample(t, cpu=cpu))
    assert store.query_range("cons-a", "cpu_usage", (10, 20)) == []
    assert len(store.query_range("cons-a", "cpu_usage", (0, 3))) == 3
    assert store.query_range("other", "latency", (0, 3)) == []
    assert store.window_avg("cons-a", "cpu_usage", (1, 3)) == pytest.approx(2.86 / 3)
    assert store.window_avg("cons-a", "latency", (1, 2)) == pytest.approx(12.6)
    assert store.window_avg("cons-a", "latency", (7, 9)) is None
    assert store.window_avg("cons-a", "cpu_limit", (1, 3)) is None
    with pytest.raises(UnknownMetric):
        store.query_range("cons-a", "disk_io", (0, 3))
    with pytest.raises(UnknownMetric):
        store.window_avg("cons-a", "disk_io", (0, 3))
    with pytest.raises(ValueError):
        store.query_range("cons-a", "latency", (3, 1))


def test_negative_fields_rejected():
    with pytest.raises(ValueError):
        sample(-1)
    with pytest.raises(ValueError):
        sample(1, latency=-0.1)


def test_empty_export_is_header_only(tmp_path):
    MetricsStore().export(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(COLUMNS) + "\n"
    MetricsStore().export(tmp_path / "m.jsonl", "jsonl")
    assert (tmp_path / "m.jsonl").read_text() == ""


def test_absent_limits_export_as_empty_fields(tmp_path):
    store = MetricsStore([sample(1), sample(2, cpu_limit=0.799)])
    store.export(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[1] == "1,cons-a,0.94,1500000000.0,12.6,,,1"
    assert lines[2] == "2,cons-a,0.94,1500000000.0,12.6,0.799,,1"


def test_export_failures(tmp_path):
    with pytest.raises(IoFailure):
        MetricsStore([sample(1)]).export(tmp_path / "no" / "such" / "dir.csv")
    with pytest.raises(IoFailure):
        MetricsStore.load(tmp_path / "missing.csv")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(IoFailure):
        MetricsStore.load(tmp_path / "bad.csv")


def test_concurrent_readers_see_whole_samples():
    store = MetricsStore()
    errors = []

    def reader():
        for _ in range(200):
            rows = store.query_range("cons-a", "latency", (0, 10_000))
            ticks = [t for t, _ in rows]
            if ticks != sorted(set(ticks)):
                errors.append(ticks)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for tick in range(2000):
        store.record(sample(tick))
    for t in threads:
        t.join()
    assert not errors


floats = st.floats(0, 1e12, allow_nan=False, allow_infinity=False)
samples = st.builds(
    MetricsSample,
    tick=st.integers(0, 50),
    deployment=st.sampled_from(["cons-a", "cons-b", "svc,with-comma"]),
    cpu_usage=floats,
    mem_usage=floats,
    latency=floats,
    cpu_limit=st.one_of(st.none(), floats),
    mem_limit=st.one_of(st.none(), floats),
    replicas=st.integers(1, 9),
)


@given(st.lists(samples, max_size=40))
def test_query_range_strictly_ascending(items):
    store = MetricsStore(items)
    for dep in store.deployments():
        ticks = [t for t, _ in store.query_range(dep, "latency", (0, 50))]
        assert all(a < b for a, b in zip(ticks, ticks[1:]))


@given(samples)
def test_single_sample_window_avg(s):
    store = MetricsStore([s])
    assert store.window_avg(s.deployment, "latency", (s.tick, s.tick)) == s.latency


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
@given(items=st.lists(samples, max_size=30))
def test_export_import_identity(tmp_path_factory, fmt, items):
    path = tmp_path_factory.mktemp("exp") / f"m.{fmt}"
    store = MetricsStore(items)
    store.export(path, fmt)
    assert MetricsStore.load(path, fmt) == store
