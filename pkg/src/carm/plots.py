"""Figures for run reports. Rendering is headless and file-only."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from carm.report import RunReport
    from carm.runner import RunResult

# keep PNGs byte-stable across runs
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def utilization_figure(result: RunResult, report: RunReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    workers = [n.name for n in result.final.nodes if n.role == "worker"]
    for node in workers:
        pts = [(t, u) for t, n, u in result.utilization if n == node]
        if pts:
            ax.plot([t for t, _ in pts], [100 * u for _, u in pts], label=node, lw=1.2)
    for t in sorted({d.enforced_at for d in report.deployments if d.enforced_at is not None}):
        ax.axvline(t, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("tick")
    ax.set_ylabel("CPU utilization (%)")
    ax.legend(fontsize=8, loc="best")
    fig.tight_layout()
    return _save(fig, path)


def latency_figure(result: RunResult, report: RunReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for dep in result.metrics.deployments():
        series = result.metrics.series(dep).samples
        ax.plot([s.tick for s in series], [s.latency for s in series], label=dep, lw=1.0)
    ax.set_xlabel("tick")
    ax.set_ylabel("latency (s)")
    ax.legend(fontsize=8, loc="best", ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def cpu_table_figure(report: RunReport, path: Path) -> Path:
    rows = [d for d in report.deployments if d.cpu_opt is not None]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    xs = range(len(rows))
    ax.bar([x - 0.2 for x in xs], [d.cpu_init for d in rows], width=0.4, label="initial")
    ax.bar([x + 0.2 for x in xs], [d.cpu_opt for d in rows], width=0.4, label="optimized")
    ax.set_xticks(list(xs), [d.name for d in rows])
    ax.set_ylabel("CPU (cores)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def render_run(result: RunResult, report: RunReport, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        utilization_figure(result, report, out / "utilization.png"),
        latency_figure(result, report, out / "latency.png"),
    ]
    if any(d.cpu_opt is not None for d in report.deployments):
        paths.append(cpu_table_figure(report, out / "cpu.png"))
    return paths
