"""Run reports, reproduction experiments and figures."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from carm import sim
from carm.errors import IoFailure, UnknownExperiment
from carm.runner import RunConfig, RunResult, run

EXPERIMENTS = ("table1", "table2", "timeline")
BUNDLED = "reference-worker1"

# reference figures the reproduction is checked against
REFERENCE_LATENCY = {"cons-a": 14.9, "cons-b": 15.1, "cons-c": 14.3}
LATENCY_BAND = 0.05
INCREASE_RANGE = (0.15, 0.21)
REFERENCE_UTILIZATION = 0.6075
UTILIZATION_BAND = 0.01


@dataclass(frozen=True)
class DeploymentRow:
    name: str
    node: str
    cpu_init: float
    lat_init: float
    cpu_opt: float | None = None
    lat_opt: float | None = None
    enforced_at: int | None = None


@dataclass(frozen=True)
class NodeRow:
    name: str
    cpu_use_pct: float
    cpu_reserved_pct: float
    mem_reserved_pct: float


@dataclass(frozen=True)
class RunReport:
    scenario: str
    seed: int
    ticks: int
    deployments: tuple[DeploymentRow, ...]
    nodes: tuple[NodeRow, ...]
    conflicts: tuple[dict, ...] = ()
    resolutions: tuple[dict, ...] = ()
    rejected: tuple[dict, ...] = ()
    agents: tuple[dict, ...] = ()
    unresolved: tuple[str, ...] = ()

    @property
    def mean_latency_increase(self) -> float | None:
        ratios = [d.lat_opt / d.lat_init - 1 for d in self.deployments if d.lat_opt is not None]
        return statistics.fmean(ratios) if ratios else None

    def deployment(self, name: str) -> DeploymentRow:
        for row in self.deployments:
            if row.name == name:
                return row
        raise KeyError(name)

    def node(self, name: str) -> NodeRow:
        for row in self.nodes:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["mean_latency_increase"] = self.mean_latency_increase
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def build_report(result: RunResult) -> RunReport:
    enforced: dict[str, int] = {}
    for e in result.events:
        if e.kind is sim.EventKind.LIMIT_APPLIED:
            enforced.setdefault(e.deployment, e.tick)

    rows = []
    for dep in result.initial.deployments:
        final = result.final.deployment(dep.name)
        samples = list(result.metrics.series(dep.name).samples)
        at = enforced.get(dep.name)
        pre = [s for s in samples if at is None or s.tick < at]
        post = [s for s in samples if at is not None and s.tick >= at]
        cpu_opt = lat_opt = None
        if post:
            cpu_opt = final.cpu_limit if final.cpu_limit is not None else _mean([s.cpu_usage for s in post])
            lat_opt = _mean([s.latency for s in post])
        rows.append(
            DeploymentRow(
                name=dep.name,
                node=final.node,
                cpu_init=_mean([s.cpu_usage for s in pre]) or dep.cpu_demand,
                lat_init=_mean([s.latency for s in pre]) or dep.base_latency,
                cpu_opt=cpu_opt,
                lat_opt=lat_opt,
                enforced_at=at,
            )
        )

    nodes = tuple(
        NodeRow(
            name=n.name,
            cpu_use_pct=100 * sim.node_utilization(result.final, n.name),
            cpu_reserved_pct=100 * sim.node_cpu_reserved(result.final, n.name),
            mem_reserved_pct=100 * sim.node_mem_reserved(result.final, n.name),
        )
        for n in result.final.nodes
    )
    agents = tuple(e.to_dict() for _, e in sorted(result.agents.items()))
    return RunReport(
        scenario=result.scenario.name,
        seed=result.config.seed,
        ticks=result.final.tick,
        deployments=tuple(rows),
        nodes=nodes,
        conflicts=tuple(c.to_dict() for c in result.conflicts),
        resolutions=tuple(r.to_dict() for r in result.resolutions),
        rejected=tuple(result.rejected),
        agents=agents,
        unresolved=tuple(result.unresolved),
    )


# -- output files ---------------------------------------------------------------


def timeline_rows(result: RunResult) -> list[tuple[int, str, float]]:
    return list(result.utilization)


def write_timeline(rows: list[tuple[int, str, float]], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tick", "node", "utilization"])
        for tick, node, util in rows:
            w.writerow([tick, node, repr(util)])


def write_outputs(result: RunResult, report: RunReport, out: str | Path, figures: bool = True) -> list[Path]:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json", out / "metrics.csv", out / "metrics.jsonl", out / "timeline.csv", out / "events.jsonl"]
        paths[0].write_text(report.to_json())
        result.metrics.export(paths[1], "csv")
        result.metrics.export(paths[2], "jsonl")
        write_timeline(result.utilization, paths[3])
        with open(paths[4], "w") as f:
            for e in result.events:
                f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write outputs to {out}: {exc}") from exc
    if figures:
        from carm import plots

        paths += plots.render_run(result, report, out / "figures")
    return paths


# -- reproduction -------------------------------------------------------------


def bundled_scenario(name: str = BUNDLED) -> sim.Scenario:
    ref = resources.files("carm") / "scenarios" / f"{name}.json"
    with resources.as_file(ref) as path:
        return sim.load_scenario(path)


def bundled_names() -> list[str]:
    return sorted(p.name[:-5] for p in (resources.files("carm") / "scenarios").iterdir() if p.name.endswith(".json"))


@dataclass
class Reproduction:
    experiment: str
    passed: bool
    text: str
    data: dict[str, Any] = field(default_factory=dict)
    result: RunResult | None = None


def _table1(result: RunResult, report: RunReport) -> Reproduction:
    spec = result.scenario.agents[0].spec
    factor = spec["cpu_factor"]
    lines = [
        f"{'service':<8} {'cpu_init':>9} {'cpu_opt':>9} {'expect':>9} {'lat_init':>9} {'lat_opt':>9} {'analytic':>9} {'ref':>6} {'dev':>7}"
    ]
    rows, ok = [], True
    for row in report.deployments:
        dep = result.initial.deployment(row.name)
        expect_cpu = dep.cpu_demand * factor
        final = result.final.deployment(row.name)
        analytic = sim.latency_model(dep.base_latency, dep.cpu_demand, final.cpu_limit)
        ref = REFERENCE_LATENCY.get(row.name)
        dev = None if ref is None or row.lat_opt is None else row.lat_opt / ref - 1
        within = dev is not None and abs(dev) <= LATENCY_BAND
        ok &= within
        rows.append(
            {
                "service": row.name,
                "cpu_init": row.cpu_init,
                "cpu_opt": row.cpu_opt,
                "cpu_expected": expect_cpu,
                "lat_init": row.lat_init,
                "lat_opt": row.lat_opt,
                "lat_analytic": analytic,
                "lat_reference": ref,
                "deviation": dev,
                "within_band": within,
            }
        )
        lines.append(
            f"{row.name:<8} {row.cpu_init:9.3f} {_fmt(row.cpu_opt)} {expect_cpu:9.3f} {row.lat_init:9.3f} "
            f"{_fmt(row.lat_opt)} {analytic:9.3f} {_fmt(ref, 6, 1)} {_fmt(dev, 7, 3, pct=True)}"
        )
    inc = report.mean_latency_increase
    inc_ok = inc is not None and INCREASE_RANGE[0] <= inc <= INCREASE_RANGE[1]
    lines.append(f"mean latency increase: {_fmt(inc, 0, 2, pct=True).strip()} (accepted range 15% to 21%)")
    lines.append(f"latency band: +/-{LATENCY_BAND:.0%} of reference")
    return Reproduction("table1", ok and inc_ok, "\n".join(lines), {"rows": rows, "mean_latency_increase": inc})


def _table2(result: RunResult, report: RunReport) -> Reproduction:
    lines = [f"{'node':<8} {'cpu_use%':>9} {'cpu_res%':>9} {'mem_res%':>9}"]
    for n in report.nodes:
        lines.append(f"{n.name:<8} {n.cpu_use_pct:9.2f} {n.cpu_reserved_pct:9.2f} {n.mem_reserved_pct:9.2f}")
    util = report.node("worker-1").cpu_use_pct / 100
    ok = abs(util - REFERENCE_UTILIZATION) <= UTILIZATION_BAND
    lines.append(f"worker-1 utilization {util:.4%} (expected {REFERENCE_UTILIZATION:.2%} +/- 1 point)")
    return Reproduction(
        "table2", ok, "\n".join(lines), {"nodes": [asdict(n) for n in report.nodes], "worker1_utilization": util}
    )


def _timeline(result: RunResult, report: RunReport) -> Reproduction:
    series = [(t, u) for t, node, u in result.utilization if node == "worker-1"]
    at = min((r.enforced_at for r in report.deployments if r.enforced_at is not None), default=None)
    before = next((u for t, u in series if at is not None and t == at - 1), None)
    after = next((u for t, u in series if t == at), None)
    ok = before is not None and after is not None and after < before
    lines = ["tick,utilization"] + [f"{t},{u:.6f}" for t, u in series]
    lines.append(f"# enforcement tick {at}: {_fmt(before, 0, 4).strip()} -> {_fmt(after, 0, 4).strip()}")
    return Reproduction(
        "timeline", ok, "\n".join(lines), {"series": series, "enforced_at": at, "before": before, "after": after}
    )


_EXPERIMENTS = {"table1": _table1, "table2": _table2, "timeline": _timeline}


def reproduce(
    experiment: str,
    *,
    seed: int = 0,
    ticks: int = 60,
    noise_epsilon: float | None = None,
    config: RunConfig | None = None,
) -> Reproduction:
    if experiment not in _EXPERIMENTS:
        raise UnknownExperiment(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {experiment!r}")
    scenario = bundled_scenario()
    if noise_epsilon is not None:
        scenario = scenario.with_sim(noise_epsilon=noise_epsilon)
    base = config or RunConfig()
    result = run(scenario, RunConfig(seed=seed, ticks=ticks, watcher=base.watcher, registry_path=base.registry_path))
    report = build_report(result)
    rep = _EXPERIMENTS[experiment](result, report)
    rep.result = result
    return rep


def _fmt(value: float | None, width: int = 9, digits: int = 3, pct: bool = False) -> str:
    if value is None:
        return f"{'-':>{width}}"
    return f"{value:{width}.{digits}%}" if pct else f"{value:{width}.{digits}f}"
