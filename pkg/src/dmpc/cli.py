"""Command line entry point.

``dmpc run CONFIG --mode MODE --out DIR`` runs a closed-loop simulation or
one side of a TCP deployment; ``dmpc compare A B`` reports the gap between
two ``summary.txt`` files. Log verbosity comes from ``DMPC_LOG``
(``DEBUG``, ``INFO``, ``WARNING``...).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import yaml

from .central import CentralController
from .comm.inprocess import CommError
from .comm.tcp import parse_address
from .config import ConfigError, RunConfig, load_config
from .coordinator import RoundError
from .distributed import InProcessController, TcpController, run_agent
from .node import NodeError
from .simulator import SimulationError, SimulationLog, mpc_loop

log = logging.getLogger("dmpc")

MODES = ("sim-central", "sim-distributed-inproc", "sim-distributed-tcp", "coordinator", "agent")


def problem_digest(cfg: RunConfig) -> str:
    raw = cfg.raw
    key = {"horizon": raw.get("horizon"), "agents": raw.get("agents"), "couplings": raw.get("couplings"),
           "events": raw.get("events"), "dt": cfg.dt, "steps": cfg.steps}
    return hashlib.sha256(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_summary(path, values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            v = format(v, ".17g")
        lines.append(f"{k}={v}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_summary(path) -> dict:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value")
            out[k.strip()] = v.strip()
    return out


def _num(d, k):
    try:
        return float(d[k])
    except (KeyError, ValueError):
        return math.nan


def compare_summaries(a: dict, b: dict) -> dict:
    """Cost gap of ``b`` relative to ``a`` in percent plus iteration and
    timing figures."""
    if a.get("problem") != b.get("problem"):
        raise ValueError(f"summaries describe different problems ({a.get('problem')} vs {b.get('problem')})")
    rep = {}
    for k in ("mean_cost", "final_cost", "closed_loop_cost"):
        ca, cb = _num(a, k), _num(b, k)
        rep[f"{k}_a"], rep[f"{k}_b"] = ca, cb
        rep[f"{k}_gap_percent"] = 0.0 if ca == cb else 100.0 * (cb - ca) / abs(ca) if ca else math.inf
    for k in ("mean_iterations", "total_iterations"):
        rep[f"{k}_a"], rep[f"{k}_b"] = _num(a, k), _num(b, k)
    for d, tag in ((a, "a"), (b, "b")):
        for k in sorted(d):
            if k.startswith("agent_") and "_time_" in k:
                rep[f"{k}_{tag}"] = _num(d, k)
    return rep


def _overrides(args) -> dict:
    ov = {}
    if args.q_max is not None:
        ov["admm.q_max"] = args.q_max
    if args.eps is not None:
        ov["admm.eps"] = args.eps
    if args.steps is not None:
        ov["simulation.steps"] = args.steps
    if args.approx is not None:
        names = [] if args.approx in ("", "none") else args.approx.split(",")
        bad = set(names) - {"cost", "dynamics", "constraints"}
        if bad:
            raise ConfigError(f"--approx: unknown flags {sorted(bad)}")
        for f in ("cost", "dynamics", "constraints"):
            ov[f"approximation.{f}"] = f in names
    for item in args.set or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        ov[k] = yaml.safe_load(v)
    return ov


def _agent_entry(cfg: RunConfig, agent_id: int):
    """Spec and incident directed couplings of ``agent_id``, from the
    initial agents or from a plug-in event."""
    from .models import expand_couplings
    couplings = expand_couplings(cfg.couplings)
    for spec in cfg.agents:
        if int(spec["id"]) == agent_id:
            inc = [c for c in couplings if agent_id in (int(c["to"]), int(c["from"]))]
            return spec, inc
    for e in cfg.events:
        if e.action == "add" and e.agent_id == agent_id:
            return e.agent, list(e.couplings)
    raise ConfigError(f"agent {agent_id} is not defined in the config")


def _controller(cfg: RunConfig, mode: str):
    if mode == "sim-central":
        return CentralController(cfg.problem, cfg.solver)
    if mode == "sim-distributed-inproc":
        return InProcessController(cfg.problem, cfg.admm, cfg.solver, cfg.network.timeout, cfg.agent_admm)
    if mode == "sim-distributed-tcp":
        return TcpController(cfg.problem, cfg.admm, cfg.solver, cfg.network.timeout,
                             host=cfg.network.host, agent_admm=cfg.agent_admm,
                             register_timeout=cfg.network.register_timeout)
    host, port = parse_address(cfg.network.coordinator)
    ctl = TcpController(cfg.problem, cfg.admm, cfg.solver, cfg.network.timeout, host=host, port=port,
                        spawn_agents=False, agent_admm=cfg.agent_admm,
                        register_timeout=cfg.network.register_timeout)
    return ctl


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    mode = args.mode
    out = Path(args.out)

    if mode == "agent":
        if args.id is None:
            print("agent mode needs --id", file=sys.stderr)
            return 2
        try:
            spec, inc = _agent_entry(cfg, args.id)
        except ConfigError as exc:
            print(str(exc), file=sys.stderr)
            return 2
        coord = args.coordinator or cfg.network.coordinator
        host, port = parse_address(args.listen) if args.listen else (cfg.network.host, 0)
        try:
            node = run_agent(spec, inc, cfg.problem.T, cfg.problem.N, coord, cfg.agent_admm.get(args.id, cfg.admm),
                             cfg.solver, host, port, cfg.network.idle_timeout)
        except (CommError, NodeError, OSError) as exc:
            print(f"agent {args.id}: {exc}", file=sys.stderr)
            return 1
        if node.agent is not None and node.agent.history is not None:
            node.agent.write_diagnostics(out / f"admm_{args.id}_last_round.csv")
        return 0

    if mode == "coordinator" and args.coordinator:
        cfg.network.coordinator = args.coordinator
    summary = {"mode": mode, "problem": problem_digest(cfg), "controller": cfg.controller, "seed": cfg.seed}
    try:
        ctl = _controller(cfg, mode)
    except (RoundError, CommError, OSError) as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        write_summary(out / "summary.txt", {**summary, "completed": 0, "error": str(exc).replace("\n", " ")})
        return 1
    status = 0
    slog: SimulationLog
    try:
        slog = mpc_loop(cfg.problem, ctl, cfg.steps, cfg.dt, cfg.events, cfg.substeps, out_dir=out)
    except SimulationError as exc:
        print(str(exc), file=sys.stderr)
        slog = exc.log
        summary["error"] = str(exc).replace("\n", " ")
        status = 1
    finally:
        coord = getattr(ctl, "coordinator", None)
        if coord is not None:
            coord.write_log(out / "coordinator.csv")
            summary.update({f"messages_sent_{k}": v for k, v in sorted(coord.sent.items())})
            summary["epoch"] = coord.registry.epoch
        try:
            ctl.close()
        except (CommError, OSError):
            pass
    summary.update(slog.summary())
    write_summary(out / "summary.txt", summary)
    print(f"{mode}: {len(slog)} steps, mean global cost {summary['mean_cost']:.6g}, "
          f"mean iterations {summary['mean_iterations']:.3g}; results in {out}")
    return status


def cmd_compare(args) -> int:
    try:
        a, b = read_summary(args.a), read_summary(args.b)
        rep = compare_summaries(a, b)
    except OSError as exc:
        print(f"cannot read summary: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    for k, v in rep.items():
        print(f"{k}={v:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmpc", description="Distributed MPC via ADMM")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a simulation or a TCP role")
    r.add_argument("config", help="YAML config file")
    r.add_argument("--mode", choices=MODES, default="sim-distributed-inproc")
    r.add_argument("--out", default="out", help="output directory")
    r.add_argument("--id", type=int, help="agent id (agent mode)")
    r.add_argument("--coordinator", help="coordinator host:port (agent/coordinator modes)")
    r.add_argument("--listen", help="host:port the agent listens on (agent mode)")
    r.add_argument("--q-max", type=int, dest="q_max")
    r.add_argument("--eps", type=float)
    r.add_argument("--steps", type=int)
    r.add_argument("--approx", help="comma list of cost,dynamics,constraints or 'none'")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="compare two summary.txt files")
    c.add_argument("a")
    c.add_argument("b")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DMPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
