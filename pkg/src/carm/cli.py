"""Command-line entry point: ``carm run | reproduce | agent apply | serve``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path
from typing import Any

import yaml

from carm import sim
from carm.client import ApiError, Client, ConnectionFailure
from carm.errors import CarmError
from carm.watcher import WatcherConfig

log = logging.getLogger("carm")

# flag dest -> WatcherConfig field
WATCHER_FLAGS = {
    "interval": "interval_ticks",
    "spec_conflict_threshold": "spec_conflict_threshold",
    "latency_degradation_factor": "latency_degradation_factor",
    "baseline_window": "baseline_window",
    "tolerance": "tolerance",
}


def _load_doc(path: str | Path) -> Any:
    text = Path(path).read_text()
    return yaml.safe_load(text)  # YAML is a superset of JSON


def _add_watcher_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("watcher")
    g.add_argument("--interval", type=int, help="reconcile every N ticks (default 1)")
    g.add_argument("--spec-conflict-threshold", type=int, help="reapplications before a spec conflict (default 3)")
    g.add_argument("--latency-degradation-factor", type=float, help="latency breach multiplier (default 1.30)")
    g.add_argument("--baseline-window", type=int, help="ticks averaged for baselines (default 5)")
    g.add_argument("--tolerance", type=float, help="relative enforcement tolerance (default 0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carm", description="Conflict-aware resource management on a simulated cluster.")
    parser.add_argument("--config", help="JSON or YAML file with default flag values")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and write a report")
    p.add_argument("--scenario", help="scenario JSON file, or the name of a bundled scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--ticks", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--registry", help="model registry directory (loaded if present, saved after the run)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    _add_watcher_flags(p)

    p = sub.add_parser("reproduce", help="reproduce a reference experiment on the bundled scenario")
    p.add_argument("experiment", help="table1, table2 or timeline")
    p.add_argument("--seed", type=int)
    p.add_argument("--ticks", type=int)
    p.add_argument("--epsilon", type=float, help="override the scenario noise amplitude")
    p.add_argument("--out", help="also write the run's outputs and figures here")
    p.add_argument("--registry")
    _add_watcher_flags(p)

    p = sub.add_parser("agent", help="manage agents on a running controller")
    agent_sub = p.add_subparsers(dest="agent_command", required=True)
    a = agent_sub.add_parser("apply", help="submit an agent spec file")
    a.add_argument("-f", "--file", required=True, dest="file")
    a.add_argument("--controller", help="controller address HOST:PORT")

    p = sub.add_parser("serve", help="run the controller and decision engine as a service")
    p.add_argument("--listen", help="HOST:PORT (default 127.0.0.1:8080)")
    p.add_argument("--registry", help="model registry directory")
    p.add_argument("--scenario", help="drive this scenario in the background")
    p.add_argument("--tick-seconds", type=float, help="wall time per simulated tick (default 1.0)")
    _add_watcher_flags(p)
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` fill anything not given on the
    command line."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            doc = _load_doc(args.config) or {}
        except (OSError, yaml.YAMLError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(doc, dict):
            parser.error("config file must hold a mapping")
        for key, value in doc.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                parser.error(f"unknown config key {key!r}")
            if getattr(args, dest) is None:
                setattr(args, dest, value)
    return args


def watcher_config(args: argparse.Namespace) -> WatcherConfig:
    values = {field: getattr(args, flag) for flag, field in WATCHER_FLAGS.items() if getattr(args, flag, None) is not None}
    return WatcherConfig(**values)


def _scenario(ref: str) -> sim.Scenario:
    from carm.report import bundled_names, bundled_scenario

    if not Path(ref).exists() and ref in bundled_names():
        return bundled_scenario(ref)
    return sim.load_scenario(ref)


def cmd_run(args: argparse.Namespace) -> int:
    from carm.report import build_report, write_outputs
    from carm.runner import RunConfig, run

    if not args.scenario:
        raise SystemExit("run: --scenario is required")
    config = RunConfig(
        seed=args.seed if args.seed is not None else 0,
        ticks=args.ticks if args.ticks is not None else 60,
        watcher=watcher_config(args),
        registry_path=Path(args.registry) if args.registry else None,
    )
    result = run(_scenario(args.scenario), config)
    report = build_report(result)
    out = Path(args.out or "out")
    write_outputs(result, report, out, figures=not args.no_figures)
    print(render_summary(report))
    print(f"outputs written to {out}")
    if result.unresolved:
        print(f"unresolved escalations: {', '.join(result.unresolved)}", file=sys.stderr)
    return result.exit_code


def render_summary(report) -> str:
    lines = [f"scenario {report.scenario}  seed {report.seed}  ticks {report.ticks}"]
    lines.append(f"{'deployment':<12} {'node':<10} {'cpu_init':>9} {'cpu_opt':>9} {'lat_init':>9} {'lat_opt':>9}")
    for d in report.deployments:
        opt_cpu = "-" if d.cpu_opt is None else f"{d.cpu_opt:.3f}"
        opt_lat = "-" if d.lat_opt is None else f"{d.lat_opt:.3f}"
        lines.append(f"{d.name:<12} {d.node:<10} {d.cpu_init:9.3f} {opt_cpu:>9} {d.lat_init:9.3f} {opt_lat:>9}")
    lines.append(f"{'node':<12} {'cpu_use%':>9} {'cpu_res%':>9} {'mem_res%':>9}")
    for n in report.nodes:
        lines.append(f"{n.name:<12} {n.cpu_use_pct:9.2f} {n.cpu_reserved_pct:9.2f} {n.mem_reserved_pct:9.2f}")
    lines.append(f"conflicts {len(report.conflicts)}  resolutions {len(report.resolutions)}")
    return "\n".join(lines)


def cmd_reproduce(args: argparse.Namespace) -> int:
    from carm.report import build_report, reproduce, write_outputs
    from carm.runner import RunConfig

    rep = reproduce(
        args.experiment,
        seed=args.seed if args.seed is not None else 0,
        ticks=args.ticks if args.ticks is not None else 60,
        noise_epsilon=args.epsilon,
        config=RunConfig(watcher=watcher_config(args), registry_path=Path(args.registry) if args.registry else None),
    )
    print(rep.text)
    print(f"{rep.experiment}: {'PASS' if rep.passed else 'FAIL'}")
    if args.out:
        write_outputs(rep.result, build_report(rep.result), args.out)
    return 0 if rep.passed else 1


def cmd_agent_apply(args: argparse.Namespace) -> int:
    try:
        doc = _load_doc(args.file)
    except OSError as exc:
        print(f"cannot read {args.file}: {exc}", file=sys.stderr)
        return 2
    except yaml.YAMLError as exc:
        print(f"{args.file} is not valid YAML or JSON: {exc}", file=sys.stderr)
        return 2
    client = Client(args.controller or "127.0.0.1:8080")
    try:
        agent_id = client.create_agent(doc)
    except ConnectionFailure as exc:
        print(f"ConnectionFailure: {exc}", file=sys.stderr)
        return 3
    except ApiError as exc:
        print(json.dumps(exc.body, sort_keys=True), file=sys.stderr)
        return 1
    print(agent_id)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from carm.controller import AgentStore
    from carm.drl.env import bootstrap_meta
    from carm.drl.registry import ModelRegistry, load_registry
    from carm.server import ApiServer, parse_listen

    registry_dir = Path(args.registry) if args.registry else None
    if registry_dir is not None and (registry_dir / "manifest.json").exists():
        registry = load_registry(registry_dir)
    else:
        log.info("bootstrapping meta model")
        registry = ModelRegistry(bootstrap_meta(), storage_path=registry_dir)
        if registry_dir is not None:
            registry.save()

    host, port = parse_listen(args.listen or "127.0.0.1:8080")
    stop = threading.Event()
    if args.scenario:
        from carm.runner import LiveLoop

        loop = LiveLoop(_scenario(args.scenario), watcher_config(args), registry)
        store = loop.store
        threading.Thread(target=loop.run, args=(stop, args.tick_seconds or 1.0), daemon=True).start()
    else:
        state = {"cluster": None}
        store = AgentStore(cluster=lambda: state["cluster"])
    server = ApiServer(store, registry, host, port)
    print(f"listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.httpd.server_close()
        if registry_dir is not None:
            registry.save()
    return 0


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {"run": cmd_run, "reproduce": cmd_reproduce, "serve": cmd_serve}
    try:
        if args.command == "agent":
            return cmd_agent_apply(args)
        return handlers[args.command](args)
    except CarmError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
