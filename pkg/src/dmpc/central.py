"""Centralised controller: the whole coupled system as one OCP, plus the
layout helpers both controller types use to assemble instances."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import AgentModel, ModelError, ProblemDescription, QuadraticCost
from .ocp import OcpInstance, TermSet
from .solver import SolverConfig, augmented_lagrangian
from .trajectory import shift_values, trapezoid_weights


class Layout:
    """Named blocks of the stacked vector ``v = [x | u]``."""

    def __init__(self):
        self._states: dict = {}
        self._controls: dict = {}
        self.n_x = 0
        self.n_u = 0

    def add_state(self, key, n):
        if key in self._states or key in self._controls:
            raise ModelError(f"duplicate block {key}")
        self._states[key] = (self.n_x, int(n))
        self.n_x += int(n)

    def add_control(self, key, n):
        if key in self._states or key in self._controls:
            raise ModelError(f"duplicate block {key}")
        self._controls[key] = (self.n_u, int(n))
        self.n_u += int(n)

    def __contains__(self, key):
        return key in self._states or key in self._controls

    def is_state(self, key):
        return key in self._states

    def idx(self, key) -> np.ndarray:
        """Indices of block ``key`` in ``v``."""
        if key in self._states:
            o, n = self._states[key]
            return np.arange(o, o + n)
        o, n = self._controls[key]
        return self.n_x + np.arange(o, o + n)

    def uidx(self, key) -> np.ndarray:
        """Indices of control block ``key`` in ``u``."""
        o, n = self._controls[key]
        return np.arange(o, o + n)

    def xidx(self, key) -> np.ndarray:
        o, n = self._states[key]
        return np.arange(o, o + n)

    @property
    def n_v(self):
        return self.n_x + self.n_u

    def states(self):
        return list(self._states)

    def controls(self):
        return list(self._controls)


class TermCollector:
    """Accumulates kernel terms with fresh output rows (constraints)."""

    def __init__(self):
        self.items = []
        self.labels = []

    def add(self, bk, args, label=""):
        if bk is not None:
            self.items.append((bk, args))
            self.labels.append(label)

    def build(self, n_v) -> Optional[TermSet]:
        n_out = sum(bk.kernel.out_dim for bk, _ in self.items)
        if n_out == 0:
            return None
        ts = TermSet(n_v, n_out)
        off = 0
        for bk, args in self.items:
            o = bk.kernel.out_dim
            ts.add(bk, args, np.arange(off, off + o))
            off += o
        return ts


def add_agent_cost(inst: OcpInstance, x_idx, u_idx, agent: AgentModel, scale: float = 1.0):
    cost = agent.cost
    if not isinstance(cost, QuadraticCost):
        raise ModelError(f"agent {agent.id}: only quadratic costs are supported")
    inst.add_quadratic(x_idx, scale * cost.Q, cost.x_des, Wf=scale * cost.P)
    inst.add_quadratic(u_idx, scale * cost.R, np.zeros(agent.n_u))


def agent_cost(agent: AgentModel, x, u, T: float) -> float:
    """``J_i = V_i(x(T)) + trapezoid(l_i)`` on the grid."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = trapezoid_weights(T, x.shape[0])
    return float(w @ agent.cost.running(x, u) + agent.cost.terminal(x[-1]))


def global_cost(problem: ProblemDescription, xs: dict, us: dict) -> float:
    """Sum of the agents' costs on predicted trajectories."""
    total = 0.0
    for i, a in problem.agents.items():
        if i not in xs or i not in us:
            raise ModelError(f"missing trajectories for agent {i}")
        total += agent_cost(a, xs[i], us[i], problem.T)
    return total


def build_central_ocp(problem: ProblemDescription) -> tuple[OcpInstance, Layout]:
    """One OCP over all agents with the exact coupled dynamics."""
    lay = Layout()
    ids = problem.ids
    for i in ids:
        lay.add_state(("x", i), problem.agents[i].n_x)
    for i in ids:
        lay.add_control(("u", i), problem.agents[i].n_u)
    n_v = lay.n_v
    dyn = TermSet(n_v, lay.n_x)
    eqc, inc = TermCollector(), TermCollector()
    for i in ids:
        a = problem.agents[i]
        xi, ui = lay.idx(("x", i)), lay.idx(("u", i))
        dyn.add(a.dynamics, [xi, ui], xi)
        eqc.add(a.eq, [xi, ui], f"g{i}")
        inc.add(a.ineq, [xi, ui], f"h{i}")
    for (i, j), c in sorted(problem.couplings.items()):
        xi, ui = lay.idx(("x", i)), lay.idx(("u", i))
        xj, uj = lay.idx(("x", j)), lay.idx(("u", j))
        if c.dynamics is not None:
            dyn.add(c.dynamics, [xi, ui, xj, uj], xi)
        eqc.add(c.eq, [xi, ui, xj, uj], f"g{i}{j}")
        inc.add(c.ineq, [xi, ui, xj, uj], f"h{i}{j}")
    x0 = np.concatenate([problem.agents[i].x0 for i in ids])
    lo = np.concatenate([problem.agents[i].u_min for i in ids])
    hi = np.concatenate([problem.agents[i].u_max for i in ids])
    inst = OcpInstance(lay.n_x, lay.n_u, problem.T, problem.N, x0, lo, hi, dyn)
    for i in ids:
        add_agent_cost(inst, lay.idx(("x", i)), lay.idx(("u", i)), problem.agents[i])
    inst.set_constraints(eqc.build(n_v), inc.build(n_v))
    inst.check()
    return inst, lay


@dataclass
class StepResult:
    """Outcome of one controller solve at a sampling instant."""

    x: dict
    u: dict
    iterations: int = 1
    converged: bool = True
    wall_time: float = 0.0
    agent_times: dict = field(default_factory=dict)
    solver_iters: dict = field(default_factory=dict)
    stalled: dict = field(default_factory=dict)
    local_costs: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    rebuilds: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    epoch: int = 0


class CentralController:
    """Solves the global OCP with the augmented Lagrangian / projected
    gradient solver and warm-starts from the shifted previous solution."""

    kind = "central"

    def __init__(self, problem: ProblemDescription, solver: SolverConfig = SolverConfig()):
        self.solver = solver
        self.problem = None
        self._warm_u = None
        self._al = None
        self._alpha = None
        self._warm_map = {}
        self.set_problem(problem)

    def set_problem(self, problem: ProblemDescription):
        old = self.problem
        self.problem = problem
        self.inst, self.layout = build_central_ocp(problem)
        if old is not None and self._warm_u is not None:
            # keep warm starts of the agents that survive the change
            u = np.zeros((problem.N, self.layout.n_u))
            for i in problem.ids:
                if i in self._warm_map:
                    u[:, self.layout.uidx(("u", i))] = self._warm_map[i]
            self._warm_u = u
        self._al = None

    def shift(self, dt: float):
        if self._warm_u is not None:
            self._warm_u = shift_values(self._warm_u, self.problem.T, dt)
            self._warm_map = {i: self._warm_u[:, self.layout.uidx(("u", i))] for i in self.problem.ids}
        if self._al is not None:
            self._al.nu = shift_values(self._al.nu, self.problem.T, dt)
            self._al.c = shift_values(self._al.c, self.problem.T, dt)

    def add_agent(self, spec: dict, couplings: list, problem: ProblemDescription):
        self.set_problem(problem)

    def remove_agent(self, agent_id, problem: ProblemDescription):
        self.set_problem(problem)

    def close(self):
        pass

    def solve(self, states: dict, t: float = 0.0) -> StepResult:
        problem = self.problem
        self.inst.x0 = np.concatenate([np.asarray(states[i], float) for i in problem.ids])
        t0 = time.perf_counter()
        res = augmented_lagrangian(self.inst, self.solver, self._warm_u, self._al, self._alpha)
        wall = time.perf_counter() - t0
        self._warm_u, self._al, self._alpha = res.u, res.al, None
        xs, us = {}, {}
        for i in problem.ids:
            xs[i] = res.x[:, self.layout.xidx(("x", i))]
            us[i] = res.u[:, self.layout.uidx(("u", i))]
        self._warm_map = dict(us)
        costs = {i: agent_cost(problem.agents[i], xs[i], us[i], problem.T) for i in problem.ids}
        d = res.diagnostics
        return StepResult(xs, us, 1, True, wall, {0: wall}, {0: d.grad_iters}, {0: d.stalled}, costs)
