"""Closed-loop MPC simulation.

At every sampling instant the controller solves from the measured plant
state, the first ``dt`` of its control prediction is applied to the plant
(the exact coupled system, integrated with RK4 on a fine sub-grid), the
controller's warm start is shifted and scheduled plug-and-play events are
applied at the boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .central import build_central_ocp, global_cost
from .model import ModelError, ProblemDescription
from .models import expand_couplings, make_agent, make_coupling
from .node import DIAG_COLUMNS
from .solver import IntegrationError, forward_integrate
from .trajectory import Trajectory, sample, trapezoid_weights, write_csv

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, message, log_: "SimulationLog" = None):
        super().__init__(message)
        self.log = log_


@dataclass
class Event:
    time: float
    action: str                # "add" | "remove"
    agent: object              # agent spec dict (add) or id (remove)
    couplings: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        action = d.get("action")
        if action not in ("add", "remove"):
            raise ModelError(f"event action must be 'add' or 'remove', got {action!r}")
        agent = d["agent"] if action == "add" else int(d.get("id", d.get("agent")))
        return cls(float(d["time"]), action, agent, expand_couplings(d.get("couplings")))

    @property
    def agent_id(self) -> int:
        return int(self.agent["id"]) if isinstance(self.agent, dict) else int(self.agent)


@dataclass
class PlantModel:
    """The true coupled system, as one ODE over all agents."""

    problem: ProblemDescription

    def __post_init__(self):
        self.inst, self.layout = build_central_ocp(self.problem)

    def rhs(self, states: dict, controls: dict, t: float = 0.0) -> dict:
        x = np.concatenate([states[i] for i in self.problem.ids])
        u = np.concatenate([controls[i] for i in self.problem.ids])
        dx = self.inst.f(x, u, t)
        return {i: dx[self.layout.xidx(("x", i))] for i in self.problem.ids}

    def advance(self, states: dict, u_pred: dict, T: float, dt: float, substeps: int):
        """Integrate over ``[0, dt]`` with the predicted controls (piecewise
        linear on the prediction grid). Returns states at the fine grid."""
        ids = self.problem.ids
        x0 = np.concatenate([np.asarray(states[i], dtype=float) for i in ids])
        times = np.linspace(0.0, dt, substeps + 1)
        u = np.concatenate([sample(Trajectory(T, u_pred[i]), times) for i in ids], axis=1)
        traj = forward_integrate(self.inst, x0, Trajectory(dt, u))
        X = traj.values
        xs = {i: X[:, self.layout.xidx(("x", i))] for i in ids}
        us = {i: u[:, self.layout.uidx(("u", i))] for i in ids}
        return xs, us


@dataclass
class StepRecord:
    t: float
    global_cost: float
    stage_cost: float
    closed_loop_cost: float
    iterations: int
    converged: bool
    wall_time: float
    epoch: int
    states: dict
    controls: dict
    agent_times: dict
    diagnostics: dict
    rebuilds: dict


class SimulationLog:
    def __init__(self, dt: float):
        self.dt = dt
        self.records: list[StepRecord] = []
        self.events: list = []          # (t, action, agent id)
        self.final_states: dict = {}
        self.completed = False

    def __len__(self):
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def state_history(self, i) -> tuple[np.ndarray, np.ndarray]:
        """Times and plant states of agent ``i`` at the steps it existed,
        including the final state after the last step."""
        rows = [(r.t, r.states[i]) for r in self.records if i in r.states]
        if i in self.final_states and self.records:
            rows.append((self.records[-1].t + self.dt, self.final_states[i]))
        return np.array([t for t, _ in rows]), np.array([x for _, x in rows])

    def agent_ids(self) -> list:
        ids = set()
        for r in self.records:
            ids.update(r.states)
        return sorted(ids)

    def timing_stats(self) -> dict:
        """Per agent min/avg/max of the per-step compute time."""
        out = {}
        for i in self.agent_ids():
            v = np.array([r.agent_times[i] for r in self.records if i in r.agent_times], dtype=float)
            if v.size:
                out[i] = (float(v.min()), float(v.mean()), float(v.max()))
        return out

    def write(self, out_dir) -> list:
        """CSV outputs. Measured times go to ``timing*.csv`` only, so all
        other files are reproducible bit for bit."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [write_csv(out / "simulation.csv", self.times, {
            "global_cost": self.column("global_cost"),
            "stage_cost": self.column("stage_cost"),
            "closed_loop_cost": self.column("closed_loop_cost"),
            "iterations": self.column("iterations"),
            "converged": self.column("converged"),
            "epoch": self.column("epoch"),
        })]
        ids = self.agent_ids()
        paths.append(write_csv(out / "timing.csv", self.times, {
            "wall_time": self.column("wall_time"),
            **{f"solve_time_{i}": np.array([r.agent_times.get(i, math.nan) for r in self.records], dtype=float)
               for i in ids},
        }))
        keep = [k for k, c in enumerate(DIAG_COLUMNS) if c != "solve_time"]
        for i in ids:
            recs = [r for r in self.records if i in r.states]
            paths.append(write_csv(out / f"agent_{i}.csv", [r.t for r in recs], {
                "x": np.array([r.states[i] for r in recs]),
                "u": np.array([r.controls[i] for r in recs]),
            }))
            diag = [(r.t, d) for r in recs if (d := r.diagnostics.get(i)) is not None and d.size]
            if diag:
                times = np.concatenate([np.full(d.shape[0], t) for t, d in diag])
                mat = np.concatenate([d for _, d in diag], axis=0)
                paths.append(write_csv(out / f"admm_{i}.csv", times,
                                       {DIAG_COLUMNS[k]: mat[:, k] for k in keep}))
                paths.append(write_csv(out / f"admm_timing_{i}.csv", times, {
                    "q": mat[:, DIAG_COLUMNS.index("q")],
                    "solve_time": mat[:, DIAG_COLUMNS.index("solve_time")]}))
        return paths

    def summary(self) -> dict:
        it = self.column("iterations")
        J = self.column("global_cost")
        s = {
            "steps": len(self.records),
            "completed": int(self.completed),
            "final_cost": float(J[-1]) if J.size else math.nan,
            "mean_cost": float(J.mean()) if J.size else math.nan,
            "closed_loop_cost": float(self.records[-1].closed_loop_cost) if self.records else math.nan,
            "total_iterations": int(it.sum()) if it.size else 0,
            "mean_iterations": float(it.mean()) if it.size else math.nan,
            "max_iterations": int(it.max()) if it.size else 0,
            "wall_time": float(self.column("wall_time").sum()) if self.records else 0.0,
        }
        for i, (lo, avg, hi) in self.timing_stats().items():
            s[f"agent_{i}_time_min"] = lo
            s[f"agent_{i}_time_avg"] = avg
            s[f"agent_{i}_time_max"] = hi
        return s


def stage_cost(problem: ProblemDescription, xs: dict, us: dict, dt: float) -> float:
    """Trapezoidal integral of ``sum_i l_i`` over a sampled interval."""
    total = 0.0
    for i, a in problem.agents.items():
        w = trapezoid_weights(dt, xs[i].shape[0])
        total += float(w @ a.cost.running(xs[i], us[i]))
    return total


def mpc_loop(problem: ProblemDescription, controller, steps: int, dt: float, events=(),
             substeps: int = 10, out_dir=None, initial_states: Optional[dict] = None) -> SimulationLog:
    if not 0 < dt <= problem.T:
        raise ValueError(f"need 0 < dt <= T, got dt={dt}, T={problem.T}")
    events = sorted((e if isinstance(e, Event) else Event.from_dict(e) for e in events), key=lambda e: e.time)
    states = {i: np.asarray((initial_states or {}).get(i, a.x0), dtype=float) for i, a in problem.agents.items()}
    plant = PlantModel(problem)
    slog = SimulationLog(dt)
    closed = 0.0
    ev = 0
    try:
        for k in range(steps):
            t = k * dt
            res = controller.solve(states, t)
            J = global_cost(problem, res.x, res.u)
            xs, us = plant.advance(states, res.u, problem.T, dt, substeps)
            sc = stage_cost(problem, xs, us, dt)
            closed += sc
            slog.records.append(StepRecord(
                t, J, sc, closed, res.iterations, res.converged, res.wall_time, res.epoch,
                {i: v.copy() for i, v in states.items()}, {i: us[i][0].copy() for i in problem.ids},
                dict(res.agent_times), dict(res.diagnostics), dict(res.rebuilds)))
            log.info("t=%.3f J=%.6g iterations=%d", t, J, res.iterations)
            states = {i: xs[i][-1].copy() for i in problem.ids}
            controller.shift(dt)
            t_next = (k + 1) * dt
            while ev < len(events) and events[ev].time <= t_next + 1e-9 * max(1.0, dt):
                e = events[ev]
                ev += 1
                if e.action == "add":
                    agent = make_agent(e.agent)
                    agents = dict(problem.agents)
                    agents[agent.id] = agent
                    cms = [make_coupling(c, agents) for c in e.couplings]
                    problem = problem.with_agent(agent, cms)
                    states[agent.id] = agent.x0.copy()
                    controller.add_agent(e.agent, [c.spec for c in cms], problem)
                else:
                    problem = problem.without_agent(e.agent_id)
                    states.pop(e.agent_id, None)
                    controller.remove_agent(e.agent_id, problem)
                plant = PlantModel(problem)
                slog.events.append((t_next, e.action, e.agent_id))
        slog.final_states = states
        slog.completed = True
    except Exception as exc:
        slog.final_states = states
        if out_dir is not None:
            slog.write(out_dir)
        what = "plant integration failed" if isinstance(exc, IntegrationError) else "simulation aborted"
        raise SimulationError(f"{what} at step {len(slog.records)}: {exc}", slog) from exc
    if out_dir is not None:
        slog.write(out_dir)
    return slog
